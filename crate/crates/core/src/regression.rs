//! Kernel ridge regression over Monte-Carlo or exact kernels, and the
//! two-stage residual adaptation predictor.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Exec;
use crate::kernel::{fcn, propagate_transformer, BlockParams, KernelError, KernelMode, McConfig};
use crate::linalg::{self, Matrix};
use crate::rng::{self, domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("non-finite values in {0}")]
    NotFinite(&'static str),
    #[error("ridge must be positive, got {0}")]
    BadRidge(f64),
    #[error("linear solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    Residual { residual: f64, tolerance: f64 },
    #[error("two-step adaptation requires an initial-stage predictor")]
    StageViolation,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("predictor document is invalid: {0}")]
    Document(String),
}

/// Kernel used by the predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Exact NNGP of a fully-connected network on the flattened input.
    Fcn { depth: usize, params: BlockParams },
    /// Monte-Carlo transformer NNGP/NTK, read out at the last token.
    Transformer {
        depth: usize,
        params: BlockParams,
        mc: McConfig,
        mode: KernelMode,
    },
}

/// Kernel value with its standard error (zero for exact kernels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelValue {
    pub value: f64,
    pub stderr: f64,
}

/// First 8 bytes of the SHA-256 of a matrix' shape and entries.
pub fn content_hash(x: &Matrix) -> u64 {
    let digest = matrix_digest(x);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn matrix_digest(x: &Matrix) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn content_hash_hex(x: &Matrix) -> String {
    hex::encode(matrix_digest(x))
}

/// Row-major flattening.
pub fn flatten(x: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.nrows() {
        out.extend(x.row(r).iter());
    }
    out
}

impl KernelSpec {
    pub fn is_exact(&self) -> bool {
        matches!(self, KernelSpec::Fcn { .. })
    }

    /// Evaluates `K(x1, x2)`. Transformer kernels seed their Monte-Carlo
    /// stream from the unordered pair of input hashes, so a pair always
    /// gets the same value regardless of where it is evaluated.
    pub fn eval(&self, x1: &Matrix, x2: &Matrix) -> Result<KernelValue, RegressionError> {
        match self {
            KernelSpec::Fcn { depth, params } => Ok(KernelValue {
                value: fcn::fcn_kernel(&flatten(x1), &flatten(x2), *depth, params)?,
                stderr: 0.0,
            }),
            KernelSpec::Transformer {
                depth,
                params,
                mc,
                mode,
            } => {
                let (h1, h2) = (content_hash(x1), content_hash(x2));
                let mut pair_mc = *mc;
                // Work inside a pair is sequential; parallelism is over pairs.
                pair_mc.exec = Exec::Sequential;
                pair_mc.seed = rng::derive(mc.seed, &[domain::PAIR, h1.min(h2), h1.max(h2)]);
                let out = propagate_transformer(x1, x2, *depth, params, &pair_mc, *mode)?;
                Ok(KernelValue {
                    value: out.value,
                    stderr: out.stderr,
                })
            }
        }
    }
}

/// Symmetric Gram matrix with per-entry standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gram {
    pub matrix: Matrix,
    pub stderr: Matrix,
}

impl Gram {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn max_stderr(&self) -> f64 {
        linalg::max_norm(&self.stderr)
    }
}

/// Evaluates the upper triangle (diagonal included) and mirrors it.
pub fn assemble_gram(data: &[Matrix], kernel: &KernelSpec, exec: Exec) -> Result<Gram, RegressionError> {
    let p = data.len();
    if p == 0 {
        return Err(RegressionError::ShapeMismatch("Gram matrix needs at least one input".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
    let values = exec.map(pairs.len(), |k| {
        let (i, j) = pairs[k];
        kernel.eval(&data[i], &data[j])
    });
    let mut matrix = Matrix::zeros(p, p);
    let mut stderr = Matrix::zeros(p, p);
    for (&(i, j), v) in pairs.iter().zip(values) {
        let v = v?;
        matrix[(i, j)] = v.value;
        matrix[(j, i)] = v.value;
        stderr[(i, j)] = v.stderr;
        stderr[(j, i)] = v.stderr;
    }
    if !linalg::all_finite(&matrix) {
        return Err(RegressionError::NotFinite("Gram matrix"));
    }
    Ok(Gram { matrix, stderr })
}

/// `K(a_i, b_j)` for all pairs, with standard errors.
pub fn cross_kernel(a: &[Matrix], b: &[Matrix], kernel: &KernelSpec, exec: Exec) -> Result<Gram, RegressionError> {
    let (p, q) = (a.len(), b.len());
    let values = exec.map(p * q, |k| kernel.eval(&a[k / q], &b[k % q]));
    let mut matrix = Matrix::zeros(p, q);
    let mut stderr = Matrix::zeros(p, q);
    for (k, v) in values.into_iter().enumerate() {
        let v = v?;
        matrix[(k / q, k % q)] = v.value;
        stderr[(k / q, k % q)] = v.stderr;
    }
    Ok(Gram { matrix, stderr })
}

/// Solves `(K + κ I) α = y` for every column of `y`.
///
/// Cholesky first; an indefinite MC Gram falls back to LU. The residual is
/// checked against `1e-8 ‖y‖_∞` after one step of iterative refinement.
pub fn ridge_solve(k: &Matrix, y: &Matrix, kappa: f64) -> Result<Matrix, RegressionError> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(RegressionError::BadRidge(kappa));
    }
    let p = k.nrows();
    if k.ncols() != p || y.nrows() != p {
        return Err(RegressionError::ShapeMismatch(format!(
            "Gram is {}x{}, targets have {} rows",
            k.nrows(),
            k.ncols(),
            y.nrows()
        )));
    }
    if !linalg::all_finite(k) {
        return Err(RegressionError::NotFinite("Gram matrix"));
    }
    if !linalg::all_finite(y) {
        return Err(RegressionError::NotFinite("targets"));
    }
    let a = linalg::symmetrize(k) + Matrix::identity(p, p) * kappa;
    let solve = |rhs: &Matrix| -> Option<Matrix> {
        match a.clone().cholesky() {
            Some(c) => Some(c.solve(rhs)),
            None => a.clone().lu().solve(rhs),
        }
    };
    let mut alpha = solve(y).ok_or(RegressionError::NotFinite("ridge system"))?;
    let residual = y - &a * &alpha;
    if let Some(step) = solve(&residual) {
        alpha += step;
    }
    let residual = linalg::max_norm(&(y - &a * &alpha));
    let tolerance = 1e-8 * linalg::max_norm(y).max(f64::MIN_POSITIVE);
    if !linalg::all_finite(&alpha) {
        return Err(RegressionError::NotFinite("dual coefficients"));
    }
    if residual > tolerance {
        return Err(RegressionError::Residual { residual, tolerance });
    }
    Ok(alpha)
}

/// Default ridge: `1e-3` times the mean Gram diagonal (or `1e-3` if zero).
pub fn default_kappa(gram: &Matrix) -> f64 {
    let p = gram.nrows().max(1) as f64;
    let mean = gram.diagonal().sum() / p;
    if mean > 0.0 && mean.is_finite() {
        1e-3 * mean
    } else {
        1e-3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Adapted,
}

/// One kernel expansion `Σ_ν α_ν K(·, X_ν)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub inputs: Vec<Matrix>,
    pub input_hashes: Vec<String>,
    /// `P x C` dual coefficients, one column per output.
    pub alpha: Matrix,
    pub kappa: f64,
    pub max_abs_alpha: f64,
}

/// Prediction with per-output standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Largest minus second-largest output.
    pub fn margin(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        match v.len() {
            0 => 0.0,
            1 => v[0].abs(),
            _ => v[0] - v[1],
        }
    }
}

/// Distance between distinct one-hot targets used for margin decisions.
pub const ONE_HOT_SEPARATION: f64 = 1.0;

pub const PREDICTOR_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedPredictor {
    pub format_version: u32,
    pub kernel: KernelSpec,
    pub stage: Stage,
    pub terms: Vec<Term>,
    /// Number of one-hot classes, or `None` for scalar regression.
    pub classes: Option<usize>,
}

/// One-hot encoding, `P x classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

fn make_term(inputs: &[Matrix], alpha: Matrix, kappa: f64) -> Term {
    Term {
        input_hashes: inputs.iter().map(content_hash_hex).collect(),
        inputs: inputs.to_vec(),
        max_abs_alpha: linalg::max_norm(&alpha),
        alpha,
        kappa,
    }
}

impl FittedPredictor {
    /// Stage-one fit on `(inputs, targets)`; `kappa = None` uses
    /// [`default_kappa`].
    pub fn fit(
        inputs: &[Matrix],
        targets: &Matrix,
        kernel: &KernelSpec,
        kappa: Option<f64>,
        classes: Option<usize>,
        exec: Exec,
    ) -> Result<Self, RegressionError> {
        let gram = assemble_gram(inputs, kernel, exec)?;
        let kappa = kappa.unwrap_or_else(|| default_kappa(&gram.matrix));
        let alpha = ridge_solve(&gram.matrix, targets, kappa)?;
        Ok(Self {
            format_version: PREDICTOR_FORMAT_VERSION,
            kernel: kernel.clone(),
            stage: Stage::Initial,
            terms: vec![make_term(inputs, alpha, kappa)],
            classes,
        })
    }

    /// Predictor that outputs zero everywhere.
    pub fn zero(kernel: &KernelSpec, outputs: usize, classes: Option<usize>) -> Self {
        Self {
            format_version: PREDICTOR_FORMAT_VERSION,
            kernel: kernel.clone(),
            stage: Stage::Initial,
            terms: vec![Term {
                inputs: Vec::new(),
                input_hashes: Vec::new(),
                alpha: Matrix::zeros(0, outputs),
                kappa: 1.0,
                max_abs_alpha: 0.0,
            }],
            classes,
        }
    }

    pub fn outputs(&self) -> usize {
        self.terms[0].alpha.ncols()
    }

    pub fn max_abs_alpha(&self) -> f64 {
        self.terms.iter().map(|t| t.max_abs_alpha).fold(0.0, f64::max)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Prediction, RegressionError> {
        let c = self.outputs();
        let mut values = vec![0.0; c];
        let mut var = vec![0.0; c];
        for term in &self.terms {
            for (nu, input) in term.inputs.iter().enumerate() {
                let k = self.kernel.eval(x, input)?;
                for o in 0..c {
                    let a = term.alpha[(nu, o)];
                    values[o] += a * k.value;
                    var[o] += a * a * k.stderr * k.stderr;
                }
            }
        }
        Ok(Prediction {
            values,
            stderr: var.into_iter().map(f64::sqrt).collect(),
        })
    }

    pub fn predict_batch(&self, xs: &[Matrix], exec: Exec) -> Result<Vec<Prediction>, RegressionError> {
        exec.map(xs.len(), |i| self.predict(&xs[i])).into_iter().collect()
    }

    /// Prediction matrix `n x C` from precomputed kernels against each
    /// term's inputs (`kernels[t]` is `n x P_t`).
    pub fn predict_from_kernels(&self, kernels: &[Matrix]) -> Matrix {
        let n = kernels.first().map_or(0, |k| k.nrows());
        let mut out = Matrix::zeros(n, self.outputs());
        for (term, k) in self.terms.iter().zip(kernels) {
            if term.inputs.is_empty() {
                continue;
            }
            out += k * &term.alpha;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serialises")
    }

    /// Parses a predictor document and checks the recorded input hashes.
    pub fn from_json(s: &str) -> Result<Self, RegressionError> {
        let f: FittedPredictor = serde_json::from_str(s).map_err(|e| RegressionError::Document(e.to_string()))?;
        if f.format_version != PREDICTOR_FORMAT_VERSION {
            return Err(RegressionError::Document(format!("unsupported version {}", f.format_version)));
        }
        for term in &f.terms {
            if term.inputs.len() != term.alpha.nrows() {
                return Err(RegressionError::Document("alpha length differs from input count".into()));
            }
            for (x, h) in term.inputs.iter().zip(&term.input_hashes) {
                if &content_hash_hex(x) != h {
                    return Err(RegressionError::Document("input hash mismatch".into()));
                }
            }
        }
        Ok(f)
    }
}

/// Second stage: fits the residuals `y - f1(X̃)` on the new data and
/// returns `f2 = f1 + Σ α̃_ν K(·, X̃_ν)`.
pub fn two_step_adapt(
    f1: &FittedPredictor,
    new_inputs: &[Matrix],
    new_targets: &Matrix,
    kappa: Option<f64>,
    exec: Exec,
) -> Result<FittedPredictor, RegressionError> {
    if f1.stage != Stage::Initial {
        return Err(RegressionError::StageViolation);
    }
    if new_targets.nrows() != new_inputs.len() || new_targets.ncols() != f1.outputs() {
        return Err(RegressionError::ShapeMismatch("targets do not match new inputs".into()));
    }
    let mut f2 = f1.clone();
    f2.stage = Stage::Adapted;
    if new_inputs.is_empty() {
        return Ok(f2);
    }
    let gram = assemble_gram(new_inputs, &f1.kernel, exec)?;
    let kernels: Vec<Matrix> = f1
        .terms
        .iter()
        .map(|t| cross_kernel(new_inputs, &t.inputs, &f1.kernel, exec).map(|g| g.matrix))
        .collect::<Result<_, _>>()?;
    let residual = new_targets - f1.predict_from_kernels(&kernels);
    let kappa = kappa.unwrap_or_else(|| default_kappa(&gram.matrix));
    let alpha = ridge_solve(&gram.matrix, &residual, kappa)?;
    f2.terms.push(make_term(new_inputs, alpha, kappa));
    Ok(f2)
}
