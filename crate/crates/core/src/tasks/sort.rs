//! Sorting: the sequence is the unsorted list, a separator, and the sorted
//! list; predictions are scored only after the separator.

use rand::Rng;

use super::TaskError;

pub const ALLOWED_VALUE_RANGES: [u32; 3] = [100, 200, 300];

#[derive(Clone, Debug, PartialEq)]
pub struct SortSequence {
    pub unsorted: Vec<u32>,
    pub sorted: Vec<u32>,
    /// Separator token id, equal to the value range `V`.
    pub sep: u32,
}

impl SortSequence {
    /// `u, SEP, s`.
    pub fn tokens(&self) -> Vec<u32> {
        let mut out = self.unsorted.clone();
        out.push(self.sep);
        out.extend(&self.sorted);
        out
    }

    /// Positions whose next-token predictions enter the loss: the separator
    /// and the sorted suffix.
    pub fn loss_mask(&self) -> Vec<bool> {
        let n = self.unsorted.len();
        (0..2 * n + 1).map(|i| i >= n).collect()
    }
}

pub fn gen_sort<R: Rng + ?Sized>(t: usize, value_range: u32, rng: &mut R) -> Result<SortSequence, TaskError> {
    if t < 1 {
        return Err(TaskError::TooShort { min: 1, got: t });
    }
    if !ALLOWED_VALUE_RANGES.contains(&value_range) {
        return Err(TaskError::InvalidParams(format!(
            "value range must be one of {ALLOWED_VALUE_RANGES:?}"
        )));
    }
    let unsorted: Vec<u32> = (0..t).map(|_| rng.random_range(0..value_range)).collect();
    Ok(from_unsorted(unsorted, value_range))
}

pub fn from_unsorted(unsorted: Vec<u32>, value_range: u32) -> SortSequence {
    let mut sorted = unsorted.clone();
    sorted.sort_unstable();
    SortSequence {
        unsorted,
        sorted,
        sep: value_range,
    }
}

/// `ψ_u(ρ) = Σ_a (ρ_a - ρ_{a+1})_+`, zero exactly for nondecreasing `ρ`.
pub fn sort_score(u: &[u32], rho: &[u32]) -> Result<u64, TaskError> {
    let mut a = u.to_vec();
    let mut b = rho.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(TaskError::NotPermutation);
    }
    Ok(rho
        .windows(2)
        .map(|w| w[0].saturating_sub(w[1]) as u64)
        .sum())
}
