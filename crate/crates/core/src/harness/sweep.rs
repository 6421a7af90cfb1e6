//! Monte-Carlo error scaling: spread of a kernel readout across seeds as a
//! function of the number of draws.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::exec::Exec;
use crate::kernel::{attention_cov_update, propagate_transformer, BlockParams, KernelMode, KernelState, McConfig, B12};
use crate::linalg::{self, Matrix};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub n_mc: Vec<usize>,
    /// Sample standard deviation of the readout at each grid point.
    pub std: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
    /// 95% normal-approximation interval for the slope.
    pub ci: (f64, f64),
}

/// Runs `readout(n_mc, seed)` for `reps` seeds per grid point and regresses
/// `log std` on `log n_mc`. Repetition seeds depend only on
/// `(seed, grid index, repetition)`.
pub fn mc_error_sweep<F>(grid: &[usize], reps: usize, seed: u64, exec: Exec, readout: F) -> Result<SweepResult, HarnessError>
where
    F: Fn(usize, u64) -> Result<f64, HarnessError> + Sync + Send,
{
    if reps < 2 {
        return Err(HarnessError::TooFewReps(reps));
    }
    if grid.len() < 2 || grid.contains(&0) {
        return Err(HarnessError::Config("sweep grid needs at least two positive sizes".into()));
    }
    let mut std = Vec::with_capacity(grid.len());
    for (g, &n) in grid.iter().enumerate() {
        let values = exec
            .map(reps, |r| readout(n, rng::derive(seed, &[rng::domain::SWEEP, g as u64, r as u64])))
            .into_iter()
            .collect::<Result<Vec<f64>, _>>()?;
        let mean = values.iter().sum::<f64>() / reps as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        std.push(var.sqrt());
    }
    let lx: Vec<f64> = grid.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = std.iter().map(|s| s.ln()).collect();
    let (_, slope, slope_se, _) = linalg::linear_fit(&lx, &ly);
    let half = 1.96 * slope_se;
    Ok(SweepResult {
        n_mc: grid.to_vec(),
        std,
        slope,
        slope_se,
        ci: (slope - half, slope + half),
    })
}

/// Last-token transformer kernel readout for [`mc_error_sweep`]. The
/// propagation itself runs sequentially; repetitions are the parallel axis.
pub fn transformer_readout<'a>(
    x1: &'a Matrix,
    x2: &'a Matrix,
    depth: usize,
    params: &'a BlockParams,
    mode: KernelMode,
    antithetic: bool,
) -> impl Fn(usize, u64) -> Result<f64, HarnessError> + Sync + Send + 'a {
    move |n, seed| {
        let mc = McConfig {
            antithetic,
            exec: Exec::Sequential,
            ..McConfig::new(n, seed)
        };
        Ok(propagate_transformer(x1, x2, depth, params, &mc, mode)?.value)
    }
}

/// Last-token cross covariance after a single attention layer.
pub fn attention_readout(state: &KernelState, antithetic: bool) -> impl Fn(usize, u64) -> Result<f64, HarnessError> + Sync + Send + '_ {
    move |n, seed| {
        let mc = McConfig {
            antithetic,
            exec: Exec::Sequential,
            ..McConfig::new(n, seed)
        };
        let last = state.t() - 1;
        Ok(attention_cov_update(state, &mc)?.sigma[B12][(last, last)])
    }
}
