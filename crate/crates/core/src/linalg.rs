//! Dense linear-algebra helpers shared by the samplers and propagators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest absolute entry, `0` for an empty matrix.
pub fn max_norm(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Matrix of i.i.d. standard normal entries.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sorted_eigen(m: &Matrix) -> (Vector, Matrix) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sorted_eigen(m).0[0]
}

/// Square-root factor `F` with `F F^T = m` for a symmetric PSD matrix,
/// negative eigenvalues clamped to zero. Works for singular input.
pub fn psd_sqrt_factor(m: &Matrix) -> Matrix {
    let (values, vectors) = sorted_eigen(m);
    let mut f = vectors;
    for (j, lambda) in values.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Lower-triangular Bartlett factor `A` with `A A^T ~ Wishart_p(I, dof)`.
/// Requires `dof >= p`.
pub fn bartlett_factor<R: Rng + ?Sized>(p: usize, dof: usize, rng: &mut R) -> Matrix {
    debug_assert!(dof >= p);
    let mut a = Matrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new((dof - i) as f64).expect("positive dof");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    a
}

/// Draws `G1 G2^T` for independent `p x dof` standard normal matrices,
/// in `O(p^3)` when `dof >= 2p` (off-diagonal block of a Wishart draw).
pub fn gaussian_inner_product<R: Rng + ?Sized>(p: usize, dof: usize, rng: &mut R) -> Matrix {
    if dof >= 2 * p {
        let a = bartlett_factor(2 * p, dof, rng);
        let top = a.rows(0, p).into_owned();
        let bottom = a.rows(p, p).into_owned();
        &top * bottom.transpose()
    } else {
        let g1 = standard_normal(p, dof, rng);
        let g2 = standard_normal(p, dof, rng);
        &g1 * g2.transpose()
    }
}

/// Sample Gram matrix `(1/n) sum_i z_i z_i^T` for `n` i.i.d. `N(0, F F^T)`
/// vectors, drawn without materialising the vectors when `n >= p`.
pub fn sample_gram<R: Rng + ?Sized>(factor: &Matrix, n: usize, rng: &mut R) -> Matrix {
    let p = factor.ncols();
    let inner = if n >= p {
        let a = bartlett_factor(p, n, rng);
        &a * a.transpose()
    } else {
        let g = standard_normal(p, n, rng);
        &g * g.transpose()
    };
    (factor * inner * factor.transpose()) / n as f64
}

/// Running first and second moments of a stream of equally-shaped matrices.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    pub count: usize,
    pub sum: Matrix,
    pub sum_sq: Matrix,
}

impl MomentAccumulator {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            count: 0,
            sum: Matrix::zeros(rows, cols),
            sum_sq: Matrix::zeros(rows, cols),
        }
    }

    pub fn push(&mut self, sample: &Matrix) {
        self.count += 1;
        self.sum += sample;
        self.sum_sq.zip_apply(sample, |acc, v| *acc += v * v);
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        self.count += other.count;
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
    }

    pub fn mean(&self) -> Matrix {
        &self.sum / self.count.max(1) as f64
    }

    /// Standard error of the mean, entrywise. Zero for fewer than two samples
    /// would understate the error, so a single sample reports `inf`.
    pub fn stderr(&self) -> Matrix {
        let n = self.count as f64;
        if self.count < 2 {
            return Matrix::from_element(self.sum.nrows(), self.sum.ncols(), f64::INFINITY);
        }
        let mean = self.mean();
        Matrix::from_fn(self.sum.nrows(), self.sum.ncols(), |r, c| {
            let m = mean[(r, c)];
            let var = ((self.sum_sq[(r, c)] - n * m * m) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
    }
}

/// Ordinary least squares fit `y = a + b x`; returns `(a, b, se_b, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = x.iter().zip(y).map(|(a_, b_)| (b_ - a - b * a_).powi(2)).sum();
    let se_b = if x.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    (a, b, se_b, r2)
}
