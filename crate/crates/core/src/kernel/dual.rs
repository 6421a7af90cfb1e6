//! Dual activations: bivariate-Gaussian expectations of `φ(u) φ(v)` and
//! `φ'(u) φ'(v)` for ReLU (closed form) and GeLU (Gauss–Hermite).

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::cell::Cell;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

use super::{Activation, BlockParams, KernelError};

/// Allowed `|k12| - sqrt(k11 k22)` before the input is rejected.
pub const PSD_2X2_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualValue {
    /// `E[φ(u) φ(v)]`.
    pub value: f64,
    /// `E[φ'(u) φ'(v)]`.
    pub derivative: f64,
}

thread_local! {
    static RELU_PERTURBATION: Cell<f64> = const { Cell::new(0.0) };
}

/// Adds `delta` to every ReLU dual value computed on the calling thread.
/// Exists so the self-test can prove that its arc-cosine suite detects a
/// broken constant; never set it outside that context.
#[doc(hidden)]
pub fn set_relu_perturbation(delta: f64) {
    RELU_PERTURBATION.with(|p| p.set(delta));
}

fn relu_perturbation() -> f64 {
    RELU_PERTURBATION.with(Cell::get)
}

pub fn dual_activation(
    k11: f64,
    k12: f64,
    k22: f64,
    params: &BlockParams,
) -> Result<DualValue, KernelError> {
    let k12 = validate_2x2(k11, k12, k22)?;
    let (k11, k22) = (k11.max(0.0), k22.max(0.0));
    Ok(match params.activation {
        Activation::Relu => relu_dual(k11, k12, k22),
        Activation::Gelu => gelu_dual(k11, k12, k22, params.gauss_hermite_order),
    })
}

/// Returns `k12`, clamped onto the PSD boundary if it overshoots slightly.
fn validate_2x2(k11: f64, k12: f64, k22: f64) -> Result<f64, KernelError> {
    let bad = || KernelError::NotPsd2x2 { k11, k12, k22 };
    if !(k11.is_finite() && k12.is_finite() && k22.is_finite()) || k11 < -1e-10 || k22 < -1e-10 {
        return Err(bad());
    }
    let bound = (k11.max(0.0) * k22.max(0.0)).sqrt();
    if k12.abs() > bound + PSD_2X2_TOL {
        return Err(bad());
    }
    Ok(k12.clamp(-bound, bound))
}

/// Arc-cosine kernels of degree one (value) and zero (derivative).
pub fn relu_dual(k11: f64, k12: f64, k22: f64) -> DualValue {
    let norm = (k11 * k22).sqrt();
    if norm == 0.0 {
        // One side is identically zero, and relu'(0) = 0.
        return DualValue {
            value: relu_perturbation(),
            derivative: 0.0,
        };
    }
    let cos = (k12 / norm).clamp(-1.0, 1.0);
    let theta = cos.acos();
    DualValue {
        value: norm / (2.0 * PI) * (theta.sin() + (PI - theta) * cos) + relu_perturbation(),
        derivative: (PI - theta) / (2.0 * PI),
    }
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Gauss–Hermite rule for the weight `exp(-x^2)`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: eigen-decomposition of the Jacobi matrix.
    pub fn new(order: usize) -> Self {
        let mut jacobi = Matrix::zeros(order, order);
        for i in 1..order {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i, i - 1)] = b;
            jacobi[(i - 1, i)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Shared rule for `order`, built once per process.
    pub fn cached(order: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().expect("quadrature cache poisoned");
        map.entry(order)
            .or_insert_with(|| Arc::new(GaussHermite::new(order)))
            .clone()
    }
}

/// `E[f(u) g(v)]` for `(u, v) ~ N(0, [[k11, k12], [k12, k22]])` by a
/// tensor-product Gauss–Hermite rule.
pub fn bivariate_expectation(
    k11: f64,
    k12: f64,
    k22: f64,
    order: usize,
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
) -> f64 {
    let rule = GaussHermite::cached(order);
    let a = k11.max(0.0).sqrt();
    let b = if a > 0.0 { k12 / a } else { 0.0 };
    let c = (k22 - b * b).max(0.0).sqrt();
    let scale = std::f64::consts::SQRT_2;
    let mut total = 0.0;
    for (xi, wi) in rule.nodes.iter().zip(&rule.weights) {
        let u = scale * a * xi;
        let fu = f(u);
        let mut inner = 0.0;
        for (xj, wj) in rule.nodes.iter().zip(&rule.weights) {
            inner += wj * g(scale * (b * xi + c * xj));
        }
        total += wi * fu * inner;
    }
    total / PI
}

fn gelu_dual(k11: f64, k12: f64, k22: f64, order: usize) -> DualValue {
    DualValue {
        value: bivariate_expectation(k11, k12, k22, order, gelu, gelu),
        derivative: bivariate_expectation(k11, k12, k22, order, gelu_derivative, gelu_derivative),
    }
}
