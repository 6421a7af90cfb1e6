//! Substring detection with near-miss negatives.
//!
//! Letters are tokens `0..26`, the separator is token 26. The layout is
//! `X, SEP, M` with `|M| = 3`.

use rand::Rng;

use super::TaskError;

pub const ALPHABET: u32 = 26;
pub const SEP: u32 = ALPHABET;
pub const PATTERN_LEN: usize = 3;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct StringMatchSequence {
    pub text: Vec<u32>,
    pub pattern: [u32; PATTERN_LEN],
}

impl StringMatchSequence {
    pub fn tokens(&self) -> Vec<u32> {
        let mut out = self.text.clone();
        out.push(SEP);
        out.extend(self.pattern);
        out
    }

    /// Stored classification target `1 - g(X)`: 1 when the pattern occurs.
    pub fn target(&self) -> u32 {
        u32::from(contains(&self.text, &self.pattern))
    }
}

/// Parses a lowercase three-letter pattern.
pub fn parse_pattern(s: &str) -> Result<[u32; PATTERN_LEN], TaskError> {
    let bytes = s.as_bytes();
    if bytes.len() != PATTERN_LEN || !bytes.iter().all(u8::is_ascii_lowercase) {
        return Err(TaskError::InvalidParams(format!(
            "pattern must be three lowercase letters, got {s:?}"
        )));
    }
    Ok([0, 1, 2].map(|i| u32::from(bytes[i] - b'a')))
}

pub fn random_pattern<R: Rng + ?Sized>(rng: &mut R) -> [u32; PATTERN_LEN] {
    [0; PATTERN_LEN].map(|_| rng.random_range(0..ALPHABET))
}

pub fn gen_string_match<R: Rng + ?Sized>(
    t: usize,
    pattern: [u32; PATTERN_LEN],
    positive: bool,
    rng: &mut R,
) -> Result<StringMatchSequence, TaskError> {
    if t < PATTERN_LEN {
        return Err(TaskError::TooShort { min: PATTERN_LEN, got: t });
    }
    if pattern.iter().any(|&c| c >= ALPHABET) {
        return Err(TaskError::InvalidParams("pattern letter out of range".into()));
    }
    for _ in 0..MAX_ATTEMPTS {
        let mut text: Vec<u32> = (0..t).map(|_| rng.random_range(0..ALPHABET)).collect();
        let at = rng.random_range(0..=t - PATTERN_LEN);
        if positive {
            text[at..at + PATTERN_LEN].copy_from_slice(&pattern);
        } else {
            let mut near = pattern;
            let slot = rng.random_range(0..PATTERN_LEN);
            let shift = rng.random_range(1..ALPHABET);
            near[slot] = (near[slot] + shift) % ALPHABET;
            text[at..at + PATTERN_LEN].copy_from_slice(&near);
            if contains(&text, &pattern) {
                continue;
            }
        }
        return Ok(StringMatchSequence { text, pattern });
    }
    Err(TaskError::InvalidParams(format!(
        "no negative of length {t} found for the pattern"
    )))
}

pub fn contains(text: &[u32], pattern: &[u32]) -> bool {
    text.windows(pattern.len()).any(|w| w == pattern)
}

/// Windows matching exactly `len - 1` pattern characters.
pub fn near_miss_count(text: &[u32], pattern: &[u32]) -> usize {
    text.windows(pattern.len())
        .filter(|w| w.iter().zip(pattern).filter(|(a, b)| a == b).count() + 1 == pattern.len())
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn minimal_positive_is_the_pattern() {
        let mut r = rng::stream(5, &[]);
        let p = parse_pattern("abc").unwrap();
        let s = gen_string_match(3, p, true, &mut r).unwrap();
        assert_eq!(s.text, vec![0, 1, 2]);
        assert_eq!(s.target(), 1);
        assert_eq!(s.tokens(), vec![0, 1, 2, SEP, 0, 1, 2]);
    }

    #[test]
    fn negatives_have_no_match_and_a_near_miss() {
        let mut r = rng::stream(6, &[]);
        for i in 0..2000 {
            let p = random_pattern(&mut r);
            let s = gen_string_match(3 + i % 20, p, false, &mut r).unwrap();
            assert!(!contains(&s.text, &p));
            assert!(near_miss_count(&s.text, &p) >= 1);
            assert_eq!(s.target(), 0);
        }
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!(parse_pattern("zza").unwrap(), [25, 25, 0]);
        assert!(parse_pattern("ab").is_err());
        assert!(parse_pattern("aBc").is_err());
    }
}
