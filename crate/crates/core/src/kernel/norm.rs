//! Token-wise updates: infinite-width LayerNorm and the MLP dual kernel.

use crate::linalg::Matrix;

use super::dual::dual_activation;
use super::{diag_block, BlockParams, KernelError, KernelState, BLOCK_INPUTS, B12};

/// Diagonal entries below this are rejected as negative variances.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-10;

fn diagonals(state: &KernelState) -> Result<[Vec<f64>; 2], KernelError> {
    let t = state.t();
    let mut out = [Vec::with_capacity(t), Vec::with_capacity(t)];
    for (i, diag) in out.iter_mut().enumerate() {
        let block = &state.sigma[diag_block(i)];
        for a in 0..t {
            let v = block[(a, a)];
            if v < -NEGATIVE_VARIANCE_TOL || !v.is_finite() {
                return Err(KernelError::NegativeVariance { value: v });
            }
            diag.push(v.max(0.0));
        }
    }
    Ok(out)
}

/// Infinite-width LayerNorm with unit gain and zero bias: every token is
/// rescaled to unit variance, `σ_ab ← σ_ab / sqrt((k_aa + ε)(k_bb + ε))`.
///
/// A token whose variance and `ε` are both zero maps to zero.
pub fn layernorm_cov(state: &KernelState, params: &BlockParams) -> Result<KernelState, KernelError> {
    let diag = diagonals(state)?;
    let diag_se: [Vec<f64>; 2] = [0, 1].map(|i| {
        let se = &state.sigma_se[diag_block(i)];
        (0..state.t()).map(|a| se[(a, a)]).collect()
    });
    let eps = params.ln_epsilon;
    let t = state.t();
    let mut out = state.clone();
    for (k, &(i, j)) in BLOCK_INPUTS.iter().enumerate() {
        let scale = Matrix::from_fn(t, t, |a, b| {
            let d = (diag[i][a] + eps) * (diag[j][b] + eps);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        });
        let sigma = state.sigma[k].component_mul(&scale);
        out.sigma_se[k] = Matrix::from_fn(t, t, |a, b| {
            let rel = |v: f64, se: f64| if v + eps > 0.0 { 0.5 * se / (v + eps) } else { 0.0 };
            state.sigma_se[k][(a, b)] * scale[(a, b)]
                + sigma[(a, b)].abs() * (rel(diag[i][a], diag_se[i][a]) + rel(diag[j][b], diag_se[j][b]))
        });
        if let (Some(theta), Some(theta_se)) = (out.theta.as_mut(), out.theta_se.as_mut()) {
            theta[k] = theta[k].component_mul(&scale);
            theta_se[k] = theta_se[k].component_mul(&scale);
            if params.ln_param_ntk {
                theta[k] += &sigma;
                theta_se[k] += &out.sigma_se[k];
            }
        }
        out.sigma[k] = sigma;
    }
    Ok(out)
}

/// `σ_ab ← σ_b^2 + σ_W^2 E[φ(u) φ(v)]` on every entry of every block.
pub fn mlp_cov_update(state: &KernelState, params: &BlockParams) -> Result<KernelState, KernelError> {
    let mut out = mlp_update(state, params, false)?;
    out.theta = None;
    out.theta_se = None;
    Ok(out)
}

/// Covariance update plus `Θ_ab ← σ_ab^out + Θ_ab σ_W^2 E[φ'(u) φ'(v)]`.
pub fn mlp_ntk_update(state: &KernelState, params: &BlockParams) -> Result<KernelState, KernelError> {
    state.theta_blocks()?;
    mlp_update(state, params, true)
}

fn mlp_update(state: &KernelState, params: &BlockParams, with_ntk: bool) -> Result<KernelState, KernelError> {
    params.validate()?;
    let diag = diagonals(state)?;
    let t = state.t();
    let w2 = params.sigma_w * params.sigma_w;
    let b2 = params.sigma_b * params.sigma_b;
    let mut out = state.clone();
    for (k, &(i, j)) in BLOCK_INPUTS.iter().enumerate() {
        let mut sigma = Matrix::zeros(t, t);
        let mut deriv = Matrix::zeros(t, t);
        for a in 0..t {
            for b in 0..t {
                // Diagonal blocks are evaluated on their upper triangle and
                // mirrored so they stay exactly symmetric.
                if k != B12 && b < a {
                    sigma[(a, b)] = sigma[(b, a)];
                    deriv[(a, b)] = deriv[(b, a)];
                    continue;
                }
                let d = dual_activation(diag[i][a], state.sigma[k][(a, b)], diag[j][b], params)?;
                sigma[(a, b)] = b2 + w2 * d.value;
                deriv[(a, b)] = w2 * d.derivative;
            }
        }
        // Price's theorem: ∂E[φ(u)φ(v)]/∂k12 = E[φ'(u)φ'(v)].
        out.sigma_se[k] = state.sigma_se[k].component_mul(&deriv);
        if with_ntk {
            let (theta, theta_se) = state.theta_blocks()?;
            let new_theta = &sigma + theta[k].component_mul(&deriv);
            let new_se = &out.sigma_se[k] + theta_se[k].component_mul(&deriv);
            out.theta.as_mut().expect("checked")[k] = new_theta;
            out.theta_se.as_mut().expect("checked")[k] = new_se;
        }
        out.sigma[k] = sigma;
    }
    Ok(out)
}

/// Largest per-entry gain `σ_W^2 E[φ'φ']` of the MLP map; used as a
/// worst-case error amplification factor.
pub fn mlp_lipschitz(state: &KernelState, params: &BlockParams) -> f64 {
    let w2 = params.sigma_w * params.sigma_w;
    let mut worst = 0.0_f64;
    let t = state.t();
    for (k, &(i, j)) in BLOCK_INPUTS.iter().enumerate() {
        for a in 0..t {
            for b in 0..t {
                let k11 = state.sigma[diag_block(i)][(a, a)];
                let k22 = state.sigma[diag_block(j)][(b, b)];
                if let Ok(d) = dual_activation(k11, state.sigma[k][(a, b)], k22, params) {
                    worst = worst.max(w2 * d.derivative);
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Activation;
    use crate::linalg;
    use crate::rng;
    use std::f64::consts::PI;

    fn psd_state(t: usize, seed: u64) -> KernelState {
        let mut r = rng::stream(seed, &[2]);
        let g = linalg::standard_normal(2 * t, 2 * t + 3, &mut r);
        let joint = &g * g.transpose() / (2 * t + 3) as f64;
        let b = |r: usize, c: usize| joint.view((r * t, c * t), (t, t)).into_owned();
        KernelState::from_blocks(b(0, 0), b(0, 1), b(1, 1)).unwrap()
    }

    fn eps0() -> BlockParams {
        BlockParams {
            ln_epsilon: 0.0,
            ..BlockParams::default()
        }
    }

    #[test]
    fn unit_diagonal_is_left_unchanged() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let s = KernelState::from_blocks(m.clone(), m.clone() * 0.5, m.clone()).unwrap();
        let out = layernorm_cov(&s, &eps0()).unwrap();
        assert_eq!(out.sigma, s.sigma);
    }

    #[test]
    fn scale_is_removed() {
        let m = Matrix::identity(3, 3) * 4.0;
        let s = KernelState::from_blocks(m.clone(), m.clone(), m).unwrap();
        let out = layernorm_cov(&s, &eps0()).unwrap();
        assert_eq!(out.sigma[0], Matrix::identity(3, 3));
    }

    #[test]
    fn negative_variance_is_rejected() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-6]);
        let s = KernelState::from_blocks(m.clone(), Matrix::zeros(2, 2), m).unwrap();
        assert!(matches!(layernorm_cov(&s, &eps0()), Err(KernelError::NegativeVariance { .. })));
    }

    #[test]
    fn he_normalised_relu_has_unit_fixed_point() {
        let ones = Matrix::from_element(2, 2, 1.0);
        let s = KernelState::from_blocks(ones.clone(), ones.clone(), ones.clone()).unwrap();
        let out = mlp_cov_update(&s, &BlockParams::default()).unwrap();
        assert!(linalg::max_abs_diff(&out.sigma[1], &ones) < 1e-15);
    }

    #[test]
    fn zero_weight_variance_leaves_bias_only() {
        let params = BlockParams {
            sigma_w: 0.0,
            sigma_b: 0.3,
            ..BlockParams::default()
        };
        let s = psd_state(3, 1).with_theta(Matrix::identity(3, 3), Matrix::identity(3, 3), Matrix::identity(3, 3));
        let out = mlp_ntk_update(&s.unwrap(), &params).unwrap();
        let expected = Matrix::from_element(3, 3, 0.09);
        for k in 0..3 {
            assert!(linalg::max_abs_diff(&out.sigma[k], &expected) < 1e-15);
            assert!(linalg::max_abs_diff(&out.theta.as_ref().unwrap()[k], &expected) < 1e-15);
        }
    }

    #[test]
    fn zero_theta_gives_theta_equal_to_sigma() {
        let z = Matrix::zeros(3, 3);
        let s = psd_state(3, 2).with_theta(z.clone(), z.clone(), z).unwrap();
        let s = layernorm_cov(&s, &eps0()).unwrap();
        let s = KernelState { theta: Some([Matrix::zeros(3, 3), Matrix::zeros(3, 3), Matrix::zeros(3, 3)]), ..s };
        let out = mlp_ntk_update(&s, &BlockParams::default()).unwrap();
        assert_eq!(out.theta.unwrap(), out.sigma);
    }

    #[test]
    fn relu_ntk_matches_independent_scalar_composition() {
        // Written from the textbook arc-cosine definitions, not the crate.
        fn arccos0(c: f64) -> f64 {
            (PI - c.clamp(-1.0, 1.0).acos()) / (2.0 * PI)
        }
        fn arccos1(k11: f64, k12: f64, k22: f64) -> f64 {
            let n = (k11 * k22).sqrt();
            let th = (k12 / n).clamp(-1.0, 1.0).acos();
            n * (th.sin() + (PI - th) * th.cos()) / (2.0 * PI)
        }
        let params = BlockParams {
            sigma_w: 1.3,
            sigma_b: 0.2,
            activation: Activation::Relu,
            ..BlockParams::default()
        };
        let base = psd_state(4, 3);
        let th = psd_state(4, 4).sigma;
        let s = base.with_theta(th[0].clone(), th[1].clone(), th[2].clone()).unwrap();
        let out = mlp_ntk_update(&s, &params).unwrap();
        let w2 = 1.69;
        for (k, &(i, j)) in BLOCK_INPUTS.iter().enumerate() {
            for a in 0..4 {
                for b in 0..4 {
                    let k11 = s.sigma[diag_block(i)][(a, a)];
                    let k22 = s.sigma[diag_block(j)][(b, b)];
                    let k12 = s.sigma[k][(a, b)];
                    let sig = 0.04 + w2 * arccos1(k11, k12, k22);
                    let theta = sig + th[k][(a, b)] * w2 * arccos0(k12 / (k11 * k22).sqrt());
                    assert!((out.sigma[k][(a, b)] - sig).abs() < 1e-12);
                    assert!((out.theta.as_ref().unwrap()[k][(a, b)] - theta).abs() < 1e-12);
                }
            }
        }
    }
}
