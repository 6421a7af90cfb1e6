//! Monte-Carlo propagation of covariance and NTK blocks through one
//! infinitely wide attention layer.
//!
//! Each MC index draws one joint sample `(S1, S2)` from the full block
//! triple; `A1 = softmax(S1)` and `A2 = softmax(S2)` then serve all three
//! blocks, and the NTK update reuses the same attention matrices as the
//! covariance update.

use crate::linalg::{self, Matrix, MomentAccumulator};
use crate::rng::{self, domain};
use crate::sampler::{ScorePairDraw, ScorePairSampler};

use super::softmax::{softmax_jacobian_trace_batch, softmax_rows};
use super::{KernelError, KernelState, McConfig, B11, B12, B22};

/// Draws per independently seeded batch. Fixed, so that results do not
/// depend on how batches are scheduled.
pub const MC_BATCH_SIZE: usize = 256;

/// Covariance update `Σ ← E[A1 Σ' A2^T]`. Drops any NTK blocks, which would
/// otherwise be stale.
pub fn attention_cov_update(state: &KernelState, mc: &McConfig) -> Result<KernelState, KernelError> {
    attention_update(state, mc, false)
}

/// Joint covariance and NTK update with common random numbers.
pub fn attention_ntk_update(state: &KernelState, mc: &McConfig) -> Result<KernelState, KernelError> {
    state.theta_blocks()?;
    attention_update(state, mc, true)
}

/// Summands of one MC draw: three covariance blocks, then optionally three
/// NTK blocks.
pub fn draw_contributions(
    draw: &ScorePairDraw,
    sigma: &[Matrix; 3],
    theta: Option<&[Matrix; 3]>,
) -> Vec<Matrix> {
    let a = [softmax_rows(&draw.s1), softmax_rows(&draw.s2)];
    let at = [a[0].transpose(), a[1].transpose()];
    let pairs = [(0, 0), (0, 1), (1, 1)];
    let mut out = Vec::with_capacity(6);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        out.push(&a[i] * &sigma[k] * &at[j]);
    }
    if let Some(theta) = theta {
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let s = &sigma[k];
            let th = &theta[k];
            let tr_ss = softmax_jacobian_trace_batch(&a[i], &a[j], s, s);
            let tr_st = softmax_jacobian_trace_batch(&a[i], &a[j], s, th);
            let mut block = &out[k] * 2.0 + &a[i] * th * &at[j];
            block += (s * 2.0 + th).component_mul(&tr_ss);
            block += s.component_mul(&tr_st);
            out.push(block);
        }
    }
    out
}

fn attention_update(state: &KernelState, mc: &McConfig, with_ntk: bool) -> Result<KernelState, KernelError> {
    if mc.n_mc == 0 {
        return Err(KernelError::InvalidParams("n_mc must be >= 1".into()));
    }
    let sigma = &state.sigma;
    let theta = if with_ntk { Some(state.theta_blocks()?.0) } else { None };
    let t = state.t();
    let sampler = ScorePairSampler::new(&sigma[B11], &sigma[B12], &sigma[B22], mc.repair)?;
    let n_blocks = if with_ntk { 6 } else { 3 };

    let samples = if mc.antithetic { mc.n_mc.div_ceil(2) } else { mc.n_mc };
    let n_batches = samples.div_ceil(MC_BATCH_SIZE);
    let layer = state.layer_index as u64;
    let parts = mc.exec.map(n_batches, |b| {
        let mut r = rng::stream(mc.seed, &[domain::MC_BATCH, layer, b as u64]);
        let count = MC_BATCH_SIZE.min(samples - b * MC_BATCH_SIZE);
        let mut acc: Vec<MomentAccumulator> = (0..n_blocks).map(|_| MomentAccumulator::new(t, t)).collect();
        for _ in 0..count {
            let u1 = linalg::standard_normal(t, t, &mut r);
            let u2 = if sampler.is_identical() {
                Matrix::zeros(t, t)
            } else {
                linalg::standard_normal(t, t, &mut r)
            };
            let mut sample = draw_contributions(&sampler.draw_from(&u1, &u2), sigma, theta);
            if mc.antithetic {
                let mirrored = draw_contributions(&sampler.draw_from(&-u1, &-u2), sigma, theta);
                for (s, m) in sample.iter_mut().zip(mirrored) {
                    *s = (&*s + m) * 0.5;
                }
            }
            for (a, s) in acc.iter_mut().zip(&sample) {
                a.push(s);
            }
        }
        acc
    });
    let mut acc: Vec<MomentAccumulator> = (0..n_blocks).map(|_| MomentAccumulator::new(t, t)).collect();
    for part in &parts {
        for (a, p) in acc.iter_mut().zip(part) {
            a.merge(p);
        }
    }

    let mean = |k: usize| {
        let m = acc[k].mean();
        if k % 3 == B12 {
            m
        } else {
            linalg::symmetrize(&m)
        }
    };
    let mc_se = |k: usize| {
        if samples < 2 {
            // A single draw carries no variance estimate; report the
            // worst case of the convex-combination bound instead.
            Matrix::from_element(t, t, linalg::max_norm(&acc[k].mean()).max(1.0))
        } else {
            acc[k].stderr()
        }
    };

    let in_sigma_se: Vec<f64> = state.sigma_se.iter().map(linalg::max_norm).collect();
    let combine = |mc: Matrix, input: f64| mc.map(|v| (v * v + input * input).sqrt());

    let new_sigma = [mean(0), mean(1), mean(2)];
    let new_sigma_se = [
        combine(mc_se(0), in_sigma_se[0]),
        combine(mc_se(1), in_sigma_se[1]),
        combine(mc_se(2), in_sigma_se[2]),
    ];
    let (new_theta, new_theta_se) = if with_ntk {
        let (theta, theta_se) = state.theta_blocks()?;
        let mut th = Vec::with_capacity(3);
        let mut se = Vec::with_capacity(3);
        for k in 0..3 {
            th.push(mean(3 + k));
            let input = ntk_input_sensitivity(
                linalg::max_norm(&sigma[k]),
                linalg::max_norm(&theta[k]),
                in_sigma_se[k],
                linalg::max_norm(&theta_se[k]),
            );
            se.push(combine(mc_se(3 + k), input));
        }
        let to_array = |v: Vec<Matrix>| -> [Matrix; 3] { v.try_into().expect("three blocks") };
        (Some(to_array(th)), Some(to_array(se)))
    } else {
        (None, None)
    };

    Ok(KernelState {
        sigma: new_sigma,
        sigma_se: new_sigma_se,
        theta: new_theta,
        theta_se: new_theta_se,
        layer_index: state.layer_index,
    })
}

/// First-order bound on how input errors `ds` (in `Σ'`) and `dt` (in `Θ'`)
/// move the NTK update, from row-stochasticity and `|Tr| ≤ 4‖M‖‖N‖`.
fn ntk_input_sensitivity(s: f64, th: f64, ds: f64, dt: f64) -> f64 {
    let direct = 2.0 * ds + dt;
    let trace_ss = (2.0 * ds + dt) * 4.0 * s * s + (2.0 * s + th) * 8.0 * s * ds;
    let trace_st = ds * 4.0 * s * th + s * 4.0 * (ds * th + s * dt);
    direct + trace_ss + trace_st
}
