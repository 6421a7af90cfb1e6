use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};

use super::attention::{attention_cov_update, attention_ntk_update};
use super::norm::{layernorm_cov, mlp_cov_update, mlp_lipschitz, mlp_ntk_update};
use super::{BlockParams, KernelError, KernelMode, KernelState, McConfig, B11, B12, B22};

/// Positional information folded into the embedding covariance.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum EmbedPe {
    #[default]
    None,
    /// Appends a `0/1` coordinate marking special tokens of each input.
    SpecialTokenFlags { x1: Vec<bool>, x2: Vec<bool> },
}

/// Covariance of the embedded inputs, `σ_ab = x_a · x_b / d`, with the
/// NTK initialised to the same blocks.
pub fn embed_covariance(x1: &Matrix, x2: &Matrix, pe: &EmbedPe) -> Result<KernelState, KernelError> {
    if x1.shape() != x2.shape() || x1.nrows() == 0 || x1.ncols() == 0 {
        return Err(KernelError::ShapeMismatch(format!(
            "inputs are {}x{} and {}x{}",
            x1.nrows(),
            x1.ncols(),
            x2.nrows(),
            x2.ncols()
        )));
    }
    if !linalg::all_finite(x1) || !linalg::all_finite(x2) {
        return Err(KernelError::ShapeMismatch("inputs contain non-finite entries".into()));
    }
    let (a, b) = match pe {
        EmbedPe::None => (x1.clone(), x2.clone()),
        EmbedPe::SpecialTokenFlags { x1: f1, x2: f2 } => {
            if f1.len() != x1.nrows() || f2.len() != x2.nrows() {
                return Err(KernelError::ShapeMismatch("one special-token flag per row is required".into()));
            }
            (append_flags(x1, f1), append_flags(x2, f2))
        }
    };
    let d = a.ncols() as f64;
    let s11 = linalg::symmetrize(&(&a * a.transpose() / d));
    let s12 = &a * b.transpose() / d;
    let s22 = linalg::symmetrize(&(&b * b.transpose() / d));
    KernelState::from_blocks(s11.clone(), s12.clone(), s22.clone())?.with_theta(s11, s12, s22)
}

fn append_flags(x: &Matrix, flags: &[bool]) -> Matrix {
    let mut out = x.clone().insert_column(x.ncols(), 0.0);
    for (r, &f) in flags.iter().enumerate() {
        out[(r, x.ncols())] = if f { 1.0 } else { 0.0 };
    }
    out
}

/// Result of a full transformer kernel evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelOutput {
    /// Readout entry `(T-1, T-1)` of the final cross block.
    pub value: f64,
    pub stderr: f64,
    /// Final cross block (`Σ12` for NNGP, `Θ12` for NTK).
    pub matrix: Matrix,
    pub matrix_se: Matrix,
    /// Product of per-layer worst-case error gains; large values mean the
    /// first-order standard errors may understate the true error.
    pub amplification: f64,
}

/// NNGP or NTK of the simplified transformer for one input pair.
///
/// The pair is put into a canonical order before propagation, so swapping
/// the arguments transposes the matrix and leaves the readout bit-identical.
pub fn propagate_transformer(
    x1: &Matrix,
    x2: &Matrix,
    depth: usize,
    params: &BlockParams,
    mc: &McConfig,
    mode: KernelMode,
) -> Result<KernelOutput, KernelError> {
    if compare_inputs(x1, x2) == Ordering::Greater {
        let mut out = propagate_ordered(x2, x1, depth, params, mc, mode)?;
        out.matrix = out.matrix.transpose();
        out.matrix_se = out.matrix_se.transpose();
        return Ok(out);
    }
    propagate_ordered(x1, x2, depth, params, mc, mode)
}

/// Total order on inputs: shape, then the bit patterns of the entries.
fn compare_inputs(a: &Matrix, b: &Matrix) -> Ordering {
    a.shape()
        .cmp(&b.shape())
        .then_with(|| a.iter().map(|v| v.to_bits()).cmp(b.iter().map(|v| v.to_bits())))
}

/// Runs the block stack on an explicit starting state.
pub fn propagate_state(
    mut state: KernelState,
    depth: usize,
    params: &BlockParams,
    mc: &McConfig,
    mode: KernelMode,
) -> Result<(KernelState, f64), KernelError> {
    if depth == 0 {
        return Err(KernelError::InvalidParams("depth must be >= 1".into()));
    }
    params.validate()?;
    if mode == KernelMode::Nngp {
        state.theta = None;
        state.theta_se = None;
    }
    let mut amplification = 1.0;
    for layer in 0..depth {
        state.layer_index = layer;
        state = match mode {
            KernelMode::Nngp => attention_cov_update(&state, mc)?,
            KernelMode::Ntk => attention_ntk_update(&state, mc)?,
        };
        let min_var = (0..state.t())
            .flat_map(|a| [state.sigma[B11][(a, a)], state.sigma[B22][(a, a)]])
            .fold(f64::INFINITY, f64::min);
        state = layernorm_cov(&state, params)?;
        amplification *= 1.0 / (min_var.max(0.0) + params.ln_epsilon).max(1e-300);
        amplification *= mlp_lipschitz(&state, params).max(f64::MIN_POSITIVE);
        state = match mode {
            KernelMode::Nngp => mlp_cov_update(&state, params)?,
            KernelMode::Ntk => mlp_ntk_update(&state, params)?,
        };
    }
    Ok((state, amplification))
}

fn propagate_ordered(
    x1: &Matrix,
    x2: &Matrix,
    depth: usize,
    params: &BlockParams,
    mc: &McConfig,
    mode: KernelMode,
) -> Result<KernelOutput, KernelError> {
    let state = embed_covariance(x1, x2, &EmbedPe::None)?;
    let (state, amplification) = propagate_state(state, depth, params, mc, mode)?;
    let (matrix, matrix_se) = match mode {
        KernelMode::Nngp => (state.sigma[B12].clone(), state.sigma_se[B12].clone()),
        KernelMode::Ntk => {
            let (theta, se) = state.theta_blocks()?;
            (theta[B12].clone(), se[B12].clone())
        }
    };
    let last = state.t() - 1;
    Ok(KernelOutput {
        value: matrix[(last, last)],
        stderr: matrix_se[(last, last)],
        matrix,
        matrix_se,
        amplification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn orthonormal_rows_give_identity() {
        let x = Matrix::identity(3, 3) * 3.0_f64.sqrt();
        let s = embed_covariance(&x, &x, &EmbedPe::None).unwrap();
        assert!(linalg::max_abs_diff(s.sigma11(), &Matrix::identity(3, 3)) < 1e-15);
    }

    #[test]
    fn zero_second_input() {
        let mut r = rng::stream(1, &[]);
        let x = linalg::standard_normal(3, 4, &mut r);
        let s = embed_covariance(&x, &Matrix::zeros(3, 4), &EmbedPe::None).unwrap();
        assert_eq!(s.sigma12(), &Matrix::zeros(3, 3));
        assert_eq!(s.sigma22(), &Matrix::zeros(3, 3));
    }

    #[test]
    fn embedding_matches_double_loop() {
        let mut r = rng::stream(2, &[]);
        let x1 = linalg::standard_normal(3, 2, &mut r);
        let x2 = linalg::standard_normal(3, 2, &mut r);
        let s = embed_covariance(&x1, &x2, &EmbedPe::None).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut dot = 0.0;
                for k in 0..2 {
                    dot += x1[(a, k)] * x2[(b, k)];
                }
                assert!((s.sigma12()[(a, b)] - dot / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn special_flags_add_an_indicator_coordinate() {
        let x = Matrix::from_element(2, 1, 1.0);
        let pe = EmbedPe::SpecialTokenFlags {
            x1: vec![true, false],
            x2: vec![true, true],
        };
        let s = embed_covariance(&x, &x, &pe).unwrap();
        assert_eq!(s.sigma12()[(0, 0)], 1.0);
        assert_eq!(s.sigma12()[(1, 0)], 0.5);
    }

    #[test]
    fn swapping_inputs_is_exact() {
        let mut r = rng::stream(3, &[]);
        let x1 = linalg::standard_normal(4, 3, &mut r);
        let x2 = linalg::standard_normal(4, 3, &mut r);
        let mc = McConfig::new(200, 5);
        let p = BlockParams::default();
        let a = propagate_transformer(&x1, &x2, 2, &p, &mc, KernelMode::Ntk).unwrap();
        let b = propagate_transformer(&x2, &x1, 2, &p, &mc, KernelMode::Ntk).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.matrix, b.matrix.transpose());
    }

    #[test]
    fn self_kernel_is_symmetric_and_nonnegative() {
        let mut r = rng::stream(4, &[]);
        let x = linalg::standard_normal(5, 3, &mut r);
        let out = propagate_transformer(&x, &x, 2, &BlockParams::default(), &McConfig::new(256, 1), KernelMode::Nngp)
            .unwrap();
        assert!(out.value >= 0.0);
        assert!(linalg::max_asymmetry(&out.matrix) < 1e-12);
        assert!(linalg::min_eigenvalue(&out.matrix) > -1e-10);
    }
}
