//! NNGP kernel of a deep fully-connected network on flattened inputs.

use super::dual::dual_activation;
use super::{BlockParams, KernelError};

/// `(K(x1, x1), K(x1, x2), K(x2, x2))` after `depth` layers.
pub fn fcn_kernel_triple(
    x1: &[f64],
    x2: &[f64],
    depth: usize,
    params: &BlockParams,
) -> Result<(f64, f64, f64), KernelError> {
    if x1.len() != x2.len() || x1.is_empty() {
        return Err(KernelError::ShapeMismatch(format!(
            "flattened inputs have lengths {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    if depth == 0 {
        return Err(KernelError::InvalidParams("depth must be >= 1".into()));
    }
    params.validate()?;
    let n = x1.len() as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / n;
    let w2 = params.sigma_w * params.sigma_w;
    let b2 = params.sigma_b * params.sigma_b;
    let mut k11 = b2 + w2 * dot(x1, x1);
    let mut k12 = b2 + w2 * dot(x1, x2);
    let mut k22 = b2 + w2 * dot(x2, x2);
    for _ in 1..depth {
        let next12 = b2 + w2 * dual_activation(k11, k12, k22, params)?.value;
        let next11 = b2 + w2 * dual_activation(k11, k11, k11, params)?.value;
        let next22 = b2 + w2 * dual_activation(k22, k22, k22, params)?.value;
        (k11, k12, k22) = (next11, next12, next22);
    }
    Ok((k11, k12, k22))
}

/// Cross kernel `K^depth(x1, x2)`; layer one is the scaled dot product.
pub fn fcn_kernel(x1: &[f64], x2: &[f64], depth: usize, params: &BlockParams) -> Result<f64, KernelError> {
    Ok(fcn_kernel_triple(x1, x2, depth, params)?.1)
}
