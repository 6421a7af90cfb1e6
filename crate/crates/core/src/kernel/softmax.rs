//! Row softmax, its Jacobian and the trace contractions used by the NTK
//! recursion.

use crate::linalg::Matrix;

use super::KernelError;

/// Tolerance for accepting a row as a probability vector.
pub const PROB_TOL: f64 = 1e-8;

/// Numerically stable softmax of a single row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Applies [`softmax`] to every row of `s`.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.nrows(), s.ncols());
    let mut row = vec![0.0; s.ncols()];
    for r in 0..s.nrows() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = s[(r, c)];
        }
        for (c, p) in softmax(&row).into_iter().enumerate() {
            out[(r, c)] = p;
        }
    }
    out
}

/// Jacobian `diag(a) - a a^T` of softmax at a point with output `a`.
pub fn softmax_jacobian(a: &[f64]) -> Matrix {
    let t = a.len();
    Matrix::from_fn(t, t, |i, j| {
        let d = if i == j { a[i] } else { 0.0 };
        d - a[i] * a[j]
    })
}

pub fn check_probability_vector(a: &[f64]) -> Result<(), KernelError> {
    let sum: f64 = a.iter().sum();
    if a.iter().any(|&v| !(v >= -PROB_TOL)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(KernelError::NotProbabilityVector);
    }
    Ok(())
}

/// `Tr(J(a1)^T M J(a2) N^T)` for two softmax output rows.
///
/// Uses the four-term Hadamard expansion, `O(T^2)`.
pub fn softmax_jacobian_trace(
    a1: &[f64],
    a2: &[f64],
    m: &Matrix,
    n: &Matrix,
) -> Result<f64, KernelError> {
    let t = a1.len();
    if a2.len() != t || m.shape() != (t, t) || n.shape() != (t, t) {
        return Err(KernelError::ShapeMismatch(
            "trace operands must share the context length".into(),
        ));
    }
    check_probability_vector(a1)?;
    check_probability_vector(a2)?;
    let mut diag = 0.0;
    let mut right = 0.0;
    let mut left = 0.0;
    let mut am_b = 0.0;
    let mut an_b = 0.0;
    // (M a2)_c, (N a2)_c and (a1^T M)_e, (a1^T N)_e.
    let mut ma2 = vec![0.0; t];
    let mut na2 = vec![0.0; t];
    let mut a1m = vec![0.0; t];
    let mut a1n = vec![0.0; t];
    for c in 0..t {
        for e in 0..t {
            diag += a1[c] * m[(c, e)] * n[(c, e)] * a2[e];
            ma2[c] += m[(c, e)] * a2[e];
            na2[c] += n[(c, e)] * a2[e];
            a1m[e] += a1[c] * m[(c, e)];
            a1n[e] += a1[c] * n[(c, e)];
        }
    }
    for c in 0..t {
        right += a1[c] * ma2[c] * na2[c];
        left += a1m[c] * a1n[c] * a2[c];
        am_b += a1[c] * ma2[c];
        an_b += a1[c] * na2[c];
    }
    Ok(diag - right - left + am_b * an_b)
}

/// All-pairs version: entry `(a, b)` is the trace for row `a` of `a1` and
/// row `b` of `a2`. Costs `O(T^3)`.
pub fn softmax_jacobian_trace_batch(a1: &Matrix, a2: &Matrix, m: &Matrix, n: &Matrix) -> Matrix {
    let mn = m.component_mul(n);
    let a2t = a2.transpose();
    let ma2 = m * &a2t;
    let na2 = n * &a2t;
    let a1m = a1 * m;
    let a1n = a1 * n;
    let mut out = a1 * mn * &a2t;
    out -= a1 * ma2.component_mul(&na2);
    out -= a1m.component_mul(&a1n) * &a2t;
    let outer_m = &a1m * &a2t;
    let outer_n = &a1n * &a2t;
    out += outer_m.component_mul(&outer_n);
    out
}

/// Gradient of softmax output `c` with respect to the scores:
/// `∂a_c/∂s_i = a_c (δ_ci - a_i)`.
pub fn gradient(a: &[f64], c: usize) -> Vec<f64> {
    (0..a.len())
        .map(|i| a[c] * (delta(c, i) - a[i]))
        .collect()
}

/// Hessian of softmax output `c`:
/// `a_c [(δ_ci - a_i)(δ_cj - a_j) - a_i (δ_ij - a_j)]`.
pub fn hessian(a: &[f64], c: usize) -> Matrix {
    let t = a.len();
    Matrix::from_fn(t, t, |i, j| {
        let ei = delta(c, i) - a[i];
        let ej = delta(c, j) - a[j];
        a[c] * (ei * ej - a[i] * (delta(i, j) - a[j]))
    })
}

/// Third derivative tensor of softmax output `c`, flattened as
/// `out[(i * T + j) * T + k]`.
pub fn third_derivative(a: &[f64], c: usize) -> Vec<f64> {
    let t = a.len();
    let e = |i: usize| delta(c, i) - a[i];
    // D_ij = ∂a_i/∂s_j = a_i (δ_ij - a_j).
    let d = |i: usize, j: usize| a[i] * (delta(i, j) - a[j]);
    let mut out = vec![0.0; t * t * t];
    for i in 0..t {
        for j in 0..t {
            for k in 0..t {
                let dd = d(i, k) * (delta(i, j) - a[j]) - a[i] * d(j, k);
                let v = e(k) * (e(i) * e(j) - d(i, j)) - d(i, k) * e(j) - e(i) * d(j, k) - dd;
                out[(i * t + j) * t + k] = a[c] * v;
            }
        }
    }
    out
}

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}
