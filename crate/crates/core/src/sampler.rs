//! Joint sampling of attention-score matrices at infinite width.
//!
//! At infinite width the score matrices `S(X1)`, `S(X2)` of one head are
//! jointly centred Gaussian with Kronecker-factored covariance
//! `E[S_ac(Xi) S_be(Xj)] = Σij_ab Σij_ce`. A draw of `S(X1)` is `L1 U L1^T`
//! for a Cholesky factor `L1` of `Σ11`; `S(X2)` is then drawn from its
//! conditional law given `S(X1)`, which keeps the Kronecker structure and
//! costs `O(T^3)` per draw once the `Σ`-dependent factors are precomputed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};

/// Eigenvalues of the conditioning matrix may exceed one by this much.
pub const EIGEN_OVERSHOOT_TOL: f64 = 1e-8;
/// Absolute symmetry tolerance for diagonal blocks, relative to `1 + ‖m‖_max`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Jitter escalation stops beyond this value.
pub const JITTER_CAP: f64 = 1e-4;
/// Largest context length accepted by the full-covariance oracle sampler.
pub const NAIVE_MAX_T: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("PSD repair failed: jitter would exceed {cap:e}")]
    RepairExceeded { cap: f64 },
    #[error("conditioning eigenvalue {lambda} lies outside [-1, 1]; block triple is inconsistent")]
    EigenOvershoot { lambda: f64 },
    #[error("context length {t} exceeds the naive sampler limit {max}")]
    TooLarge { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entries in covariance block")]
    NotFinite,
}

/// A square token-to-token covariance block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovBlock(Matrix);

impl CovBlock {
    pub fn new(m: Matrix) -> Result<Self, SamplerError> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(SamplerError::ShapeMismatch(format!(
                "covariance block must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !linalg::all_finite(&m) {
            return Err(SamplerError::NotFinite);
        }
        Ok(Self(m))
    }

    /// Builds a diagonal block, additionally checking symmetry.
    pub fn new_symmetric(m: Matrix) -> Result<Self, SamplerError> {
        let block = Self::new(m)?;
        block.check_symmetric()?;
        Ok(block)
    }

    pub fn t(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn check_symmetric(&self) -> Result<(), SamplerError> {
        let asym = linalg::max_asymmetry(&self.0);
        if asym > SYMMETRY_TOL * (1.0 + linalg::max_norm(&self.0)) {
            return Err(SamplerError::NotSymmetric { max_asymmetry: asym });
        }
        Ok(())
    }
}

/// Diagonal jitter and eigenvalue floor used to factor nearly-singular blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdRepair {
    /// Initial jitter added to the diagonal; escalated ×10 on failure.
    pub jitter: f64,
    /// Relative eigenvalue floor (times `trace / T`) for pseudo-inverses.
    pub eigen_floor: f64,
}

impl Default for PsdRepair {
    fn default() -> Self {
        Self {
            jitter: 1e-10,
            eigen_floor: 1e-10,
        }
    }
}

impl PsdRepair {
    pub const NONE: PsdRepair = PsdRepair {
        jitter: 0.0,
        eigen_floor: 1e-10,
    };
}

/// Lower-triangular factor together with the jitter that produced it.
#[derive(Clone, Debug)]
pub struct PsdFactor {
    pub l: Matrix,
    pub jitter: f64,
}

/// Cholesky factor of `m + jitter·I` for symmetric PSD `m`.
///
/// Zero pivots (up to rounding) produce zero columns, so exactly singular
/// PSD matrices factor without jitter. A clearly negative pivot escalates the
/// jitter geometrically from `repair.jitter` (or `1e-10` when that is zero).
pub fn cholesky_psd(m: &Matrix, repair: PsdRepair) -> Result<PsdFactor, SamplerError> {
    let block = CovBlock::new(m.clone())?;
    block.check_symmetric()?;
    let m = linalg::symmetrize(block.matrix());
    let scale = 1.0 + linalg::max_norm(&m);
    let mut jitter = repair.jitter.max(0.0);
    loop {
        if let Some(l) = semidefinite_cholesky(&m, jitter, scale) {
            return Ok(PsdFactor { l, jitter });
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > JITTER_CAP * (1.0 + 1e-9) {
            return Err(SamplerError::RepairExceeded { cap: JITTER_CAP });
        }
    }
}

fn semidefinite_cholesky(m: &Matrix, jitter: f64, scale: f64) -> Option<Matrix> {
    let n = m.nrows();
    let pivot_tol = 64.0 * f64::EPSILON * n as f64 * scale;
    let residual_tol = 1e-7 * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -pivot_tol {
            return None;
        }
        if d <= pivot_tol {
            // Zero pivot: the remainder of this column must vanish too.
            for i in (j + 1)..n {
                let mut r = m[(i, j)];
                for k in 0..j {
                    r -= l[(i, k)] * l[(j, k)];
                }
                if r.abs() > residual_tol {
                    return None;
                }
            }
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut r = m[(i, j)];
            for k in 0..j {
                r -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = r / pivot;
        }
    }
    Some(l)
}

/// One draw `S = L U L^T` with `U` standard normal; law `N(0, Σ11 ⊗ Σ11)`.
pub fn sample_score_single<R: Rng + ?Sized>(
    sigma11: &Matrix,
    repair: PsdRepair,
    rng: &mut R,
) -> Result<Matrix, SamplerError> {
    let factor = cholesky_psd(sigma11, repair)?;
    let u = linalg::standard_normal(factor.l.nrows(), factor.l.nrows(), rng);
    Ok(&factor.l * u * factor.l.transpose())
}

/// Joint draw of the score matrices for two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePairDraw {
    pub s1: Matrix,
    pub s2: Matrix,
}

/// Precomputed factors for repeated joint draws from one block triple.
///
/// Immutable after construction; share it across workers and give each
/// worker its own random stream.
#[derive(Clone, Debug)]
pub struct ScorePairSampler {
    t: usize,
    l1: Matrix,
    /// `Σ21 Σ11^{-1}` (pseudo-inverse when degenerate).
    regression: Matrix,
    q: Matrix,
    l2q: Matrix,
    /// `sqrt(1 - λ_i λ_j)`.
    gap: Matrix,
    identical: bool,
    degenerate: bool,
    eigenvalues: Vec<f64>,
}

impl ScorePairSampler {
    pub fn new(
        sigma11: &Matrix,
        sigma12: &Matrix,
        sigma22: &Matrix,
        repair: PsdRepair,
    ) -> Result<Self, SamplerError> {
        let t = sigma11.nrows();
        for (name, m) in [("sigma11", sigma11), ("sigma12", sigma12), ("sigma22", sigma22)] {
            if m.nrows() != t || m.ncols() != t {
                return Err(SamplerError::ShapeMismatch(format!(
                    "{name} is {}x{}, expected {t}x{t}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !linalg::all_finite(m) {
                return Err(SamplerError::NotFinite);
            }
        }
        let l1 = cholesky_psd(sigma11, repair)?.l;
        let scale = 1.0 + linalg::max_norm(sigma11).max(linalg::max_norm(sigma22));
        let same_tol = 1e-13 * scale;
        let identical = linalg::max_abs_diff(sigma11, sigma12) <= same_tol
            && linalg::max_abs_diff(sigma22, sigma12) <= same_tol;
        if identical {
            // Perfect correlation: S(X2) = S(X1) exactly.
            return Ok(Self {
                t,
                l1,
                regression: Matrix::identity(t, t),
                q: Matrix::identity(t, t),
                l2q: Matrix::zeros(t, t),
                gap: Matrix::zeros(t, t),
                identical: true,
                degenerate: false,
                eigenvalues: vec![1.0; t],
            });
        }

        // Σ22 must factor with a strictly positive diagonal to be inverted.
        let mut l2 = cholesky_psd(sigma22, repair)?;
        if (0..t).any(|i| l2.l[(i, i)] <= 0.0) {
            let floor = PsdRepair {
                jitter: repair.jitter.max(1e-10),
                ..repair
            };
            l2 = cholesky_psd(sigma22, floor)?;
            if (0..t).any(|i| l2.l[(i, i)] <= 0.0) {
                return Err(SamplerError::RepairExceeded { cap: JITTER_CAP });
            }
        }
        let l2 = l2.l;

        let (values, vectors) = linalg::sorted_eigen(sigma11);
        let trace: f64 = (0..t).map(|i| sigma11[(i, i)]).sum();
        let floor = repair.eigen_floor * (trace / t as f64).max(f64::MIN_POSITIVE);
        let degenerate = values.iter().any(|&v| v < floor);
        let mut inv = Matrix::zeros(t, t);
        for (k, &lambda) in values.iter().enumerate() {
            if lambda >= floor && lambda > 0.0 {
                let v = vectors.column(k);
                inv += (v * v.transpose()) / lambda;
            }
        }
        let sigma21 = sigma12.transpose();
        let regression = &sigma21 * &inv;
        let g = linalg::symmetrize(&(&regression * sigma12));

        // H = L2^{-1} G L2^{-T}.
        let left = l2
            .solve_lower_triangular(&g)
            .ok_or(SamplerError::RepairExceeded { cap: JITTER_CAP })?;
        let h = l2
            .solve_lower_triangular(&left.transpose())
            .ok_or(SamplerError::RepairExceeded { cap: JITTER_CAP })?;
        let (lambda, q) = linalg::sorted_eigen(&linalg::symmetrize(&h));
        let mut eigenvalues = Vec::with_capacity(t);
        for &v in lambda.iter() {
            if v.abs() > 1.0 + EIGEN_OVERSHOOT_TOL {
                return Err(SamplerError::EigenOvershoot { lambda: v });
            }
            eigenvalues.push(v.clamp(-1.0, 1.0));
        }
        let gap = Matrix::from_fn(t, t, |i, j| {
            (1.0 - eigenvalues[i] * eigenvalues[j]).max(0.0).sqrt()
        });
        let l2q = &l2 * &q;
        Ok(Self {
            t,
            l1,
            regression,
            q,
            l2q,
            gap,
            identical: false,
            degenerate,
            eigenvalues,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// `Σ11` needed the pseudo-inverse branch; draws are then exact only in
    /// the non-degenerate subspace.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// All three blocks coincide and `S(X2) = S(X1)`.
    pub fn is_identical(&self) -> bool {
        self.identical
    }

    pub fn conditioning_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Draw from explicit standard-normal matrices `u1`, `u2`.
    ///
    /// The map is linear in `(u1, u2)`, so negating both gives the
    /// antithetic partner draw.
    pub fn draw_from(&self, u1: &Matrix, u2: &Matrix) -> ScorePairDraw {
        let s1 = &self.l1 * u1 * self.l1.transpose();
        if self.identical {
            return ScorePairDraw { s2: s1.clone(), s1 };
        }
        let mean = &self.regression * &s1 * self.regression.transpose();
        let rotated = self.q.transpose() * u2 * &self.q;
        let delta = self.gap.component_mul(&rotated);
        let s2 = mean + &self.l2q * delta * self.l2q.transpose();
        ScorePairDraw { s1, s2 }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ScorePairDraw {
        let u1 = linalg::standard_normal(self.t, self.t, rng);
        let u2 = if self.identical {
            Matrix::zeros(self.t, self.t)
        } else {
            linalg::standard_normal(self.t, self.t, rng)
        };
        self.draw_from(&u1, &u2)
    }
}

/// One-shot joint draw; prefer [`ScorePairSampler`] for repeated draws.
pub fn sample_score_pair<R: Rng + ?Sized>(
    sigma11: &Matrix,
    sigma12: &Matrix,
    sigma22: &Matrix,
    repair: PsdRepair,
    rng: &mut R,
) -> Result<ScorePairDraw, SamplerError> {
    Ok(ScorePairSampler::new(sigma11, sigma12, sigma22, repair)?.draw(rng))
}

/// Full `2T^2 x 2T^2` covariance of `(vec S1, vec S2)`, row-major `(a, c)`
/// indexing within each block.
pub fn kronecker_joint_covariance(sigma11: &Matrix, sigma12: &Matrix, sigma22: &Matrix) -> Matrix {
    let t = sigma11.nrows();
    let n = t * t;
    let sigma21 = sigma12.transpose();
    let block = |i: usize, j: usize| -> &Matrix {
        match (i, j) {
            (0, 0) => sigma11,
            (0, 1) => sigma12,
            (1, 0) => &sigma21,
            _ => sigma22,
        }
    };
    let mut cov = Matrix::zeros(2 * n, 2 * n);
    for i in 0..2 {
        for j in 0..2 {
            let s = block(i, j);
            for a in 0..t {
                for c in 0..t {
                    for b in 0..t {
                        for e in 0..t {
                            cov[(i * n + a * t + c, j * n + b * t + e)] = s[(a, b)] * s[(c, e)];
                        }
                    }
                }
            }
        }
    }
    cov
}

/// Oracle sampler: one Cholesky of the full joint covariance (`O(T^6)`).
#[derive(Clone, Debug)]
pub struct NaiveJointSampler {
    t: usize,
    factor: Matrix,
}

impl NaiveJointSampler {
    pub fn new(
        sigma11: &Matrix,
        sigma12: &Matrix,
        sigma22: &Matrix,
        repair: PsdRepair,
    ) -> Result<Self, SamplerError> {
        let t = sigma11.nrows();
        if t > NAIVE_MAX_T {
            return Err(SamplerError::TooLarge { t, max: NAIVE_MAX_T });
        }
        if sigma12.shape() != (t, t) || sigma22.shape() != (t, t) {
            return Err(SamplerError::ShapeMismatch("blocks differ in size".into()));
        }
        let cov = kronecker_joint_covariance(sigma11, sigma12, sigma22);
        let factor = cholesky_psd(&cov, repair)?.l;
        Ok(Self { t, factor })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ScorePairDraw {
        let n = self.t * self.t;
        let z = linalg::standard_normal(2 * n, 1, rng);
        let v = &self.factor * z;
        let s1 = Matrix::from_fn(self.t, self.t, |a, c| v[a * self.t + c]);
        let s2 = Matrix::from_fn(self.t, self.t, |a, c| v[n + a * self.t + c]);
        ScorePairDraw { s1, s2 }
    }
}

pub fn naive_joint_sampler<R: Rng + ?Sized>(
    sigma11: &Matrix,
    sigma12: &Matrix,
    sigma22: &Matrix,
    repair: PsdRepair,
    rng: &mut R,
) -> Result<ScorePairDraw, SamplerError> {
    Ok(NaiveJointSampler::new(sigma11, sigma12, sigma22, repair)?.draw(rng))
}

/// Flattens a draw into `(vec S1, vec S2)` with the same indexing as
/// [`kronecker_joint_covariance`].
pub fn flatten_draw(draw: &ScorePairDraw) -> Vec<f64> {
    let t = draw.s1.nrows();
    let mut out = Vec::with_capacity(2 * t * t);
    for m in [&draw.s1, &draw.s2] {
        for a in 0..t {
            for c in 0..t {
                out.push(m[(a, c)]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn textbook_cholesky(m: &Matrix) -> Matrix {
        let n = m.nrows();
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = if i == j { s.sqrt() } else { s / l[(j, j)] };
            }
        }
        l
    }

    fn wishart(t: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[99]);
        let g = linalg::standard_normal(t, t + 2, &mut r);
        (&g * g.transpose()) / (t + 2) as f64
    }

    #[test]
    fn identity_factors_to_identity() {
        let f = cholesky_psd(&Matrix::identity(3, 3), PsdRepair::NONE).unwrap();
        assert_eq!(f.l, Matrix::identity(3, 3));
    }

    #[test]
    fn zero_matrix_with_jitter_gives_scaled_identity() {
        let f = cholesky_psd(&Matrix::zeros(3, 3), PsdRepair::default()).unwrap();
        let expected = Matrix::identity(3, 3) * 1e-10_f64.sqrt();
        assert!(linalg::max_abs_diff(&f.l, &expected) < 1e-20);
    }

    #[test]
    fn wishart_factor_matches_textbook_loop() {
        let m = wishart(4, 5);
        let oracle = textbook_cholesky(&(&m + Matrix::identity(4, 4) * 1e-10));
        let f = cholesky_psd(&m, PsdRepair::default()).unwrap();
        assert!(linalg::max_abs_diff(&f.l, &oracle) < 1e-12);
        let recon = &f.l * f.l.transpose();
        let target = &m + Matrix::identity(4, 4) * f.jitter;
        assert!(linalg::max_abs_diff(&recon, &target) <= 1e-8 * (1.0 + linalg::max_norm(&m)));
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = 0.5;
        assert!(matches!(
            cholesky_psd(&m, PsdRepair::default()),
            Err(SamplerError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn indefinite_input_exhausts_repair() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            cholesky_psd(&m, PsdRepair::default()).unwrap_err(),
            SamplerError::RepairExceeded { cap: JITTER_CAP }
        );
    }

    #[test]
    fn mildly_indefinite_input_is_repaired_by_escalation() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-7]);
        let f = cholesky_psd(&m, PsdRepair::default()).unwrap();
        assert!(f.jitter >= 1e-7 && f.jitter <= JITTER_CAP);
    }

    #[test]
    fn zero_covariance_without_jitter_gives_zero_scores() {
        let mut r = rng::stream(0, &[]);
        let s = sample_score_single(&Matrix::zeros(3, 3), PsdRepair::NONE, &mut r).unwrap();
        assert_eq!(s, Matrix::zeros(3, 3));
    }

    #[test]
    fn rank_one_constant_gives_constant_scores() {
        let mut r = rng::stream(1, &[]);
        let c = Matrix::from_element(4, 4, 0.7);
        let s = sample_score_single(&c, PsdRepair::NONE, &mut r).unwrap();
        let first = s[(0, 0)];
        assert!(first != 0.0);
        assert!(s.iter().all(|&v| (v - first).abs() <= 1e-14 * first.abs()));
    }

    #[test]
    fn identical_blocks_copy_the_first_draw() {
        let m = wishart(3, 8);
        let sampler = ScorePairSampler::new(&m, &m, &m, PsdRepair::default()).unwrap();
        assert!(sampler.is_identical());
        let mut r = rng::stream(2, &[]);
        let d = sampler.draw(&mut r);
        assert_eq!(d.s1, d.s2);
    }

    #[test]
    fn same_seed_same_draw() {
        let (a, b) = (wishart(3, 1), wishart(3, 2));
        let c = &a * 0.1;
        let s = ScorePairSampler::new(&a, &c, &b, PsdRepair::default()).unwrap();
        let d1 = s.draw(&mut rng::stream(4, &[1]));
        let d2 = s.draw(&mut rng::stream(4, &[1]));
        assert_eq!(d1, d2);
    }

    #[test]
    fn inconsistent_triple_is_flagged() {
        let a = Matrix::identity(2, 2);
        let cross = Matrix::identity(2, 2) * 2.0;
        let err = ScorePairSampler::new(&a, &cross, &a, PsdRepair::default()).unwrap_err();
        assert!(matches!(err, SamplerError::EigenOvershoot { .. }));
    }

    #[test]
    fn singular_sigma11_takes_pseudo_inverse_branch() {
        let v = Matrix::from_column_slice(3, 1, &[1.0, 0.5, -0.2]);
        let s11 = &v * v.transpose();
        let s22 = wishart(3, 3);
        let s12 = Matrix::zeros(3, 3);
        let sampler = ScorePairSampler::new(&s11, &s12, &s22, PsdRepair::default()).unwrap();
        assert!(sampler.is_degenerate());
    }

    #[test]
    fn naive_sampler_guards_size() {
        let m = Matrix::identity(9, 9);
        let err = NaiveJointSampler::new(&m, &m, &m, PsdRepair::default()).unwrap_err();
        assert_eq!(err, SamplerError::TooLarge { t: 9, max: 8 });
    }

    #[test]
    fn naive_identity_kronecker_has_unit_independent_entries() {
        let i2 = Matrix::identity(2, 2);
        let z = Matrix::zeros(2, 2);
        let s = NaiveJointSampler::new(&i2, &z, &i2, PsdRepair::NONE).unwrap();
        let mut r = rng::stream(11, &[]);
        let mut acc = linalg::MomentAccumulator::new(8, 8);
        for _ in 0..40_000 {
            let v = flatten_draw(&s.draw(&mut r));
            let col = Matrix::from_column_slice(8, 1, &v);
            acc.push(&(&col * col.transpose()));
        }
        let (mean, se) = (acc.mean(), acc.stderr());
        for i in 0..8 {
            for j in 0..8 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((mean[(i, j)] - target).abs() < 5.0 * se[(i, j)], "({i},{j})");
            }
        }
    }

    #[test]
    fn marginal_law_matches_kronecker_covariance() {
        // 1e5 draws of S(X1) against the analytic Σ ⊗ Σ.
        let s11 = wishart(3, 21);
        let f = cholesky_psd(&s11, PsdRepair::default()).unwrap();
        let mut r = rng::stream(12, &[]);
        let mut acc = linalg::MomentAccumulator::new(9, 9);
        for _ in 0..100_000 {
            let u = linalg::standard_normal(3, 3, &mut r);
            let s = &f.l * u * f.l.transpose();
            let v = Matrix::from_fn(9, 1, |i, _| s[(i / 3, i % 3)]);
            acc.push(&(&v * v.transpose()));
        }
        let cov = kronecker_joint_covariance(&s11, &s11, &s11);
        let (mean, se) = (acc.mean(), acc.stderr());
        for i in 0..9 {
            for j in 0..9 {
                assert!((mean[(i, j)] - cov[(i, j)]).abs() < 4.0 * se[(i, j)] + 1e-9);
            }
        }
    }
}
