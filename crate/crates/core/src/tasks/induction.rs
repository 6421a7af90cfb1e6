//! Induction-head copying: a trigger token appears once in the first half
//! and again at the end; the target is the token that followed it.

use rand::Rng;

use super::TaskError;

pub const DEFAULT_VOCAB: u32 = 1024;

/// Generated sequence with the trigger position used to build it.
#[derive(Clone, Debug, PartialEq)]
pub struct InductionSequence {
    pub tokens: Vec<u32>,
    pub trigger_index: usize,
    pub label: u32,
}

/// `trigger_index = None` draws it uniformly from `0..ceil(T/2)`.
pub fn gen_induction<R: Rng + ?Sized>(
    t: usize,
    vocab: u32,
    trigger_index: Option<usize>,
    rng: &mut R,
) -> Result<InductionSequence, TaskError> {
    if t < 4 {
        return Err(TaskError::TooShort { min: 4, got: t });
    }
    if vocab < 2 {
        return Err(TaskError::InvalidParams("induction needs a vocabulary of at least 2".into()));
    }
    let half = t.div_ceil(2);
    let i_k = match trigger_index {
        Some(i) if i < half => i,
        Some(i) => {
            return Err(TaskError::InvalidParams(format!(
                "trigger index {i} outside 0..{half}"
            )))
        }
        None => rng.random_range(0..half),
    };
    let trigger = rng.random_range(0..vocab);
    let mut tokens: Vec<u32> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    for (i, tok) in tokens.iter_mut().enumerate() {
        if i != i_k && i != t - 1 && *tok == trigger {
            *tok = replacement(trigger, vocab);
        }
    }
    tokens[i_k] = trigger;
    tokens[t - 1] = trigger;
    Ok(InductionSequence {
        label: tokens[i_k + 1],
        tokens,
        trigger_index: i_k,
    })
}

/// Stray copies of the trigger become the next vocabulary token.
pub fn replacement(trigger: u32, vocab: u32) -> u32 {
    (trigger + 1) % vocab
}

/// Recomputes the label: the token after the unique earlier occurrence of
/// the final token. `None` if the layout is violated.
pub fn induction_oracle(tokens: &[u32]) -> Option<u32> {
    let t = tokens.len();
    if t < 4 {
        return None;
    }
    let trigger = tokens[t - 1];
    let hits: Vec<usize> = (0..t - 1).filter(|&i| tokens[i] == trigger).collect();
    match hits.as_slice() {
        [i] if *i < t.div_ceil(2) => Some(tokens[i + 1]),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn minimal_layout() {
        let mut r = rng::stream(1, &[]);
        let s = gen_induction(4, DEFAULT_VOCAB, Some(0), &mut r).unwrap();
        assert_eq!(s.tokens[0], s.tokens[3]);
        assert_eq!(s.label, s.tokens[1]);
        assert_ne!(s.tokens[1], s.tokens[0]);
        assert_ne!(s.tokens[2], s.tokens[0]);
    }

    #[test]
    fn replacement_wraps_around_the_vocabulary() {
        assert_eq!(replacement(1023, 1024), 0);
        assert_eq!(replacement(5, 1024), 6);
    }

    #[test]
    fn too_short() {
        let mut r = rng::stream(1, &[]);
        assert_eq!(
            gen_induction(3, 1024, None, &mut r).unwrap_err(),
            TaskError::TooShort { min: 4, got: 3 }
        );
    }

    #[test]
    fn small_vocabulary_never_leaves_stray_triggers() {
        let mut r = rng::stream(2, &[]);
        for _ in 0..2000 {
            let s = gen_induction(12, 3, None, &mut r).unwrap();
            assert_eq!(induction_oracle(&s.tokens), Some(s.label));
        }
    }
}
