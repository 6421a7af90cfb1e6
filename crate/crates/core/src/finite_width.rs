//! Finite-width simplified transformer: explicit forward pass, FLOP
//! accounting, and empirical covariance estimation over weight draws.
//!
//! The architecture has no residual connections, no output projection and
//! no causal mask. Each block is multi-head attention averaged with
//! `1/sqrt(H)`, a LayerNorm, and a single-nonlinearity MLP.
//!
//! Empirical covariances at large width do not run the explicit forward
//! pass. Given the hidden states of a block, the query, key and value fields
//! are Gaussian with covariance `Z Z^T / d_model`, so every weight matrix can
//! be integrated out exactly: queries and keys become `F G` for a factor `F`
//! of the `2T x 2T` Gram matrix, value averages become conditional
//! covariances, and the next Gram matrix is a Wishart draw. The cost per
//! weight draw is then independent of `d_model` except for the LayerNorm and
//! nonlinearity, which act on an explicit `2T x d_model` sample.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::kernel::dual::{gelu, gelu_derivative};
use crate::kernel::softmax::softmax_rows;
use crate::kernel::{Activation, BlockParams};
use crate::linalg::{self, Matrix, MomentAccumulator, Vector};
use crate::rng::{self, domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiniteError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
}

/// Architecture sizes and MLP/LayerNorm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDims {
    pub d_in: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
    pub depth: usize,
    pub block: BlockParams,
}

impl FiniteDims {
    /// `d_k = d_model / heads`, the usual split.
    pub fn new(d_in: usize, d_model: usize, heads: usize, depth: usize) -> Self {
        Self {
            d_in,
            d_model,
            d_k: (d_model / heads.max(1)).max(1),
            heads,
            depth,
            block: BlockParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), FiniteError> {
        if self.d_in == 0 || self.d_model == 0 || self.d_k == 0 || self.heads == 0 || self.depth == 0 {
            return Err(FiniteError::InvalidDims("all dimensions must be positive".into()));
        }
        self.block
            .validate()
            .map_err(|e| FiniteError::InvalidDims(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    /// `d_model x d_k`.
    pub w_q: Matrix,
    /// `d_model x d_k`.
    pub w_k: Matrix,
    /// `d_model x d_model`.
    pub w_v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub heads: Vec<HeadWeights>,
    pub gamma: Vector,
    pub beta: Vector,
    /// `d_model x d_model`, applied on the right of the token rows.
    pub w_mlp: Matrix,
    pub b_mlp: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteParams {
    pub dims: FiniteDims,
    /// `d_in x d_model`.
    pub w_emb: Matrix,
    pub blocks: Vec<BlockWeights>,
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    linalg::standard_normal(rows, cols, rng) * std
}

/// Draws all weights: embedding `N(0, 1/d_in)`, attention projections
/// `N(0, 1/d_model)`, MLP weights `N(0, σ_W^2/d_model)`, biases
/// `N(0, σ_b^2)`, LayerNorm gain 1 and bias 0.
pub fn init_params(dims: FiniteDims, seed: u64) -> Result<FiniteParams, FiniteError> {
    dims.validate()?;
    let mut r = rng::stream(seed, &[domain::WEIGHTS]);
    let d = dims.d_model;
    let proj = 1.0 / (d as f64).sqrt();
    let w_emb = gaussian(dims.d_in, d, 1.0 / (dims.d_in as f64).sqrt(), &mut r);
    let blocks = (0..dims.depth)
        .map(|_| {
            let heads = (0..dims.heads)
                .map(|_| HeadWeights {
                    w_q: gaussian(d, dims.d_k, proj, &mut r),
                    w_k: gaussian(d, dims.d_k, proj, &mut r),
                    w_v: gaussian(d, d, proj, &mut r),
                })
                .collect();
            let bias = Normal::new(0.0, dims.block.sigma_b).expect("finite sigma_b");
            BlockWeights {
                heads,
                gamma: Vector::from_element(d, 1.0),
                beta: Vector::zeros(d),
                w_mlp: gaussian(d, d, dims.block.sigma_w * proj, &mut r),
                b_mlp: Vector::from_fn(d, |_, _| bias.sample(&mut r)),
            }
        })
        .collect();
    Ok(FiniteParams { dims, w_emb, blocks })
}

/// Hidden states of one block for a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    /// Per head, `T x T` pre-softmax scores.
    pub scores: Vec<Matrix>,
    pub attention: Vec<Matrix>,
    /// `T x d_model` attention output.
    pub attention_out: Matrix,
    pub post_ln: Matrix,
    pub post_mlp: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub embedded: Matrix,
    pub blocks: Vec<BlockTrace>,
    /// Floating-point operations in matrix products and softmax, counted
    /// by the forward pass itself (embedding excluded).
    pub counted_flops: u64,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        &self.blocks.last().expect("depth >= 1").post_mlp
    }
}

struct FlopCounter(u64);

impl FlopCounter {
    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        self.0 += 2 * (a.nrows() * a.ncols() * b.ncols()) as u64;
        a * b
    }
}

fn activation(kind: Activation) -> fn(f64) -> f64 {
    match kind {
        Activation::Relu => |x: f64| x.max(0.0),
        Activation::Gelu => gelu,
    }
}

/// Token-wise LayerNorm: `γ ⊙ (z - mean) / sqrt(var + ε) + β`, with the
/// variance over the `d_model` coordinates.
pub fn layer_norm_rows(z: &Matrix, gamma: &Vector, beta: &Vector, eps: f64) -> Matrix {
    let d = z.ncols() as f64;
    let mut out = z.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / d;
        row.add_scalar_mut(-mean);
        let var = row.norm_squared() / d;
        let inv = if var + eps > 0.0 { 1.0 / (var + eps).sqrt() } else { 0.0 };
        for (c, v) in row.iter_mut().enumerate() {
            *v = gamma[c] * *v * inv + beta[c];
        }
    }
    out
}

pub fn forward(x: &Matrix, params: &FiniteParams) -> Result<ForwardTrace, FiniteError> {
    let dims = &params.dims;
    if x.ncols() != dims.d_in || x.nrows() == 0 {
        return Err(FiniteError::ShapeMismatch(format!(
            "input is {}x{}, expected Tx{}",
            x.nrows(),
            x.ncols(),
            dims.d_in
        )));
    }
    let t = x.nrows();
    let phi = activation(dims.block.activation);
    let mut flops = FlopCounter(0);
    let embedded = x * &params.w_emb;
    let mut z = embedded.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let head_scale = 1.0 / (dims.heads as f64).sqrt();
    let score_scale = 1.0 / (dims.d_k as f64).sqrt();
    for block in &params.blocks {
        let mut scores = Vec::with_capacity(dims.heads);
        let mut attention = Vec::with_capacity(dims.heads);
        let mut out = Matrix::zeros(t, dims.d_model);
        for head in &block.heads {
            let q = flops.matmul(&z, &head.w_q);
            let k = flops.matmul(&z, &head.w_k);
            let v = flops.matmul(&z, &head.w_v);
            let s = flops.matmul(&q, &k.transpose()) * score_scale;
            // Scaling, then max-subtraction, exp, row sum and division.
            flops.0 += 5 * (t * t) as u64;
            let a = softmax_rows(&s);
            out += flops.matmul(&a, &v);
            scores.push(s);
            attention.push(a);
        }
        out *= head_scale;
        let post_ln = layer_norm_rows(&out, &block.gamma, &block.beta, dims.block.ln_epsilon);
        let mut post_mlp = flops.matmul(&post_ln.map(phi), &block.w_mlp);
        for mut row in post_mlp.row_iter_mut() {
            row += block.b_mlp.transpose();
        }
        z = post_mlp.clone();
        blocks.push(BlockTrace {
            scores,
            attention,
            attention_out: out,
            post_ln,
            post_mlp,
        });
    }
    Ok(ForwardTrace {
        embedded,
        blocks,
        counted_flops: flops.0,
    })
}

/// FLOPs of the forward pass: per block and head, queries and keys
/// (`4 T d_model d_k`), values (`2 T d_model^2`), scores (`2 T^2 d_k`),
/// softmax at 3 FLOPs per entry (exp, add, divide), and value averaging
/// (`2 T^2 d_model`); plus the MLP product (`2 T d_model^2`) per block.
pub fn flop_count(depth: u64, heads: u64, d_model: u64, d_k: u64, t: u64) -> u64 {
    let per_head = 4 * t * d_model * d_k + 2 * t * d_model * d_model + 2 * t * t * d_k + 3 * t * t + 2 * t * t * d_model;
    depth * (heads * per_head + 2 * t * d_model * d_model)
}

/// Where in a block the empirical covariance is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Fourth moments `E[S_ac(Xi) S_be(Xj)]` of pre-softmax scores,
    /// `T^2 x T^2` with row index `a*T + c` and column index `b*T + e`.
    Scores,
    AttentionOut,
    PostLayerNorm,
    PostMlp,
}

/// Empirical blocks `(X1,X1)`, `(X1,X2)`, `(X2,X2)` with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalCov {
    pub blocks: [Matrix; 3],
    pub stderr: [Matrix; 3],
    pub draws: usize,
}

impl EmpiricalCov {
    pub fn cross(&self) -> (&Matrix, &Matrix) {
        (&self.blocks[1], &self.stderr[1])
    }
}

/// What to measure and how many weight draws to average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapSpec {
    pub tap: Tap,
    /// Zero-based block index.
    pub block: usize,
    pub n_draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
}

impl TapSpec {
    pub fn new(tap: Tap, block: usize, n_draws: usize, seed: u64) -> Self {
        Self {
            tap,
            block,
            n_draws,
            seed,
            exec: Exec::default(),
        }
    }
}

/// Weight draws per independently seeded batch.
const DRAW_BATCH: usize = 32;

/// Empirical covariance at `tap` of block `block` over `n_draws` weight
/// draws, with the weights integrated out as described in the module docs.
pub fn empirical_covariance(
    x1: &Matrix,
    x2: &Matrix,
    dims: &FiniteDims,
    spec: &TapSpec,
) -> Result<EmpiricalCov, FiniteError> {
    if x1.shape() != x2.shape() || x1.ncols() != dims.d_in {
        return Err(FiniteError::ShapeMismatch("inputs must both be T x d_in".into()));
    }
    let mut stacked = Matrix::zeros(2 * x1.nrows(), dims.d_in);
    stacked.rows_mut(0, x1.nrows()).copy_from(x1);
    stacked.rows_mut(x1.nrows(), x1.nrows()).copy_from(x2);
    let input_cov = &stacked * stacked.transpose() / dims.d_in as f64;
    empirical_covariance_from_joint(&input_cov, dims, spec)
}

/// As [`empirical_covariance`], starting from hidden states whose
/// `2T x 2T` joint covariance (inputs stacked) is `joint`.
pub fn empirical_covariance_from_joint(
    joint: &Matrix,
    dims: &FiniteDims,
    spec: &TapSpec,
) -> Result<EmpiricalCov, FiniteError> {
    dims.validate()?;
    let TapSpec {
        tap,
        block,
        n_draws,
        seed,
        exec,
    } = *spec;
    if joint.nrows() != joint.ncols() || !joint.nrows().is_multiple_of(2) || joint.nrows() == 0 {
        return Err(FiniteError::ShapeMismatch("joint covariance must be 2T x 2T".into()));
    }
    if block >= dims.depth {
        return Err(FiniteError::InvalidDims(format!("block {block} >= depth {}", dims.depth)));
    }
    if n_draws < 2 {
        return Err(FiniteError::InvalidDims("at least two draws are needed".into()));
    }
    let t = joint.nrows() / 2;
    let side = if tap == Tap::Scores { t * t } else { t };
    let input_factor = linalg::psd_sqrt_factor(joint);
    let n_batches = n_draws.div_ceil(DRAW_BATCH);
    let parts = exec.map(n_batches, |b| {
        let mut r = rng::stream(seed, &[domain::WEIGHTS, b as u64]);
        let count = DRAW_BATCH.min(n_draws - b * DRAW_BATCH);
        let mut acc = [0; 3].map(|_| MomentAccumulator::new(side, side));
        for _ in 0..count {
            let sample = marginal_draw(&input_factor, dims, tap, block, &mut r);
            for (a, s) in acc.iter_mut().zip(&sample) {
                a.push(s);
            }
        }
        acc
    });
    let mut acc = [0; 3].map(|_| MomentAccumulator::new(side, side));
    for part in &parts {
        for (a, p) in acc.iter_mut().zip(part) {
            a.merge(p);
        }
    }
    Ok(EmpiricalCov {
        blocks: [0, 1, 2].map(|k| acc[k].mean()),
        stderr: [0, 1, 2].map(|k| acc[k].stderr()),
        draws: n_draws,
    })
}

fn split_blocks(c: &Matrix, t: usize) -> [Matrix; 3] {
    [
        c.view((0, 0), (t, t)).into_owned(),
        c.view((0, t), (t, t)).into_owned(),
        c.view((t, t), (t, t)).into_owned(),
    ]
}

/// One weight draw, returning the three tapped blocks.
fn marginal_draw<R: Rng + ?Sized>(
    input_factor: &Matrix,
    dims: &FiniteDims,
    tap: Tap,
    target: usize,
    r: &mut R,
) -> [Matrix; 3] {
    let n = input_factor.nrows();
    let t = n / 2;
    let d = dims.d_model;
    let phi = activation(dims.block.activation);
    let ones = Vector::from_element(d, 1.0);
    let zeros = Vector::zeros(d);
    // Gram matrix of the embedded tokens.
    let mut gram = linalg::sample_gram(input_factor, d, r);
    for block in 0..=target {
        let factor = linalg::psd_sqrt_factor(&gram);
        let score_scale = 1.0 / (dims.d_k as f64).sqrt();
        let mut post = Matrix::zeros(n, n);
        let mut score_moments = [0; 3].map(|_| Matrix::zeros(t * t, t * t));
        for _ in 0..dims.heads {
            let inner = linalg::gaussian_inner_product(n, dims.d_k, r) * score_scale;
            let scores = &factor * inner * factor.transpose();
            let s1 = scores.view((0, 0), (t, t)).into_owned();
            let s2 = scores.view((t, t), (t, t)).into_owned();
            if block == target && tap == Tap::Scores {
                let flat = |s: &Matrix| Vector::from_fn(t * t, |i, _| s[(i / t, i % t)]);
                let (f1, f2) = (flat(&s1), flat(&s2));
                score_moments[0] += &f1 * f1.transpose();
                score_moments[1] += &f1 * f2.transpose();
                score_moments[2] += &f2 * f2.transpose();
            }
            let mut a = Matrix::zeros(n, n);
            a.view_mut((0, 0), (t, t)).copy_from(&softmax_rows(&s1));
            a.view_mut((t, t), (t, t)).copy_from(&softmax_rows(&s2));
            post += &a * &gram * a.transpose();
        }
        if block == target && tap == Tap::Scores {
            return score_moments.map(|m| m / dims.heads as f64);
        }
        post /= dims.heads as f64;
        if block == target && tap == Tap::AttentionOut {
            return split_blocks(&post, t);
        }
        // Explicit attention output with the value weights integrated out.
        let z = linalg::psd_sqrt_factor(&post) * standard_normal_cols(n, d, r);
        let normed = layer_norm_rows(&z, &ones, &zeros, dims.block.ln_epsilon);
        if block == target && tap == Tap::PostLayerNorm {
            return split_blocks(&(&normed * normed.transpose() / d as f64), t);
        }
        let act = normed.map(phi);
        let w2 = dims.block.sigma_w * dims.block.sigma_w;
        let b2 = dims.block.sigma_b * dims.block.sigma_b;
        let mlp = (&act * act.transpose()) * (w2 / d as f64) + Matrix::from_element(n, n, b2);
        if block == target {
            return split_blocks(&mlp, t);
        }
        gram = linalg::sample_gram(&linalg::psd_sqrt_factor(&mlp), d, r);
    }
    unreachable!("target block is within depth")
}

fn standard_normal_cols<R: Rng + ?Sized>(rows: usize, cols: usize, r: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

/// Reference estimator that runs the explicit forward pass per draw. Only
/// practical at small width; used to validate the marginalised estimator.
pub fn empirical_covariance_explicit(
    x1: &Matrix,
    x2: &Matrix,
    dims: &FiniteDims,
    spec: &TapSpec,
) -> Result<EmpiricalCov, FiniteError> {
    let TapSpec {
        tap, block, n_draws, seed, ..
    } = *spec;
    let t = x1.nrows();
    let side = if tap == Tap::Scores { t * t } else { t };
    let mut acc = [0; 3].map(|_| MomentAccumulator::new(side, side));
    for draw in 0..n_draws {
        let params = init_params(*dims, rng::derive(seed, &[draw as u64]))?;
        let f1 = forward(x1, &params)?;
        let f2 = forward(x2, &params)?;
        let (b1, b2) = (&f1.blocks[block], &f2.blocks[block]);
        let sample = match tap {
            Tap::Scores => {
                let flat = |s: &Matrix| Vector::from_fn(t * t, |i, _| s[(i / t, i % t)]);
                let mut m = [0; 3].map(|_| Matrix::zeros(side, side));
                for (s1, s2) in b1.scores.iter().zip(&b2.scores) {
                    let (u, v) = (flat(s1), flat(s2));
                    m[0] += &u * u.transpose();
                    m[1] += &u * v.transpose();
                    m[2] += &v * v.transpose();
                }
                m.map(|x| x / dims.heads as f64)
            }
            _ => {
                let pick = |b: &BlockTrace| -> Matrix {
                    match tap {
                        Tap::AttentionOut => b.attention_out.clone(),
                        Tap::PostLayerNorm => b.post_ln.clone(),
                        _ => b.post_mlp.clone(),
                    }
                };
                let (z1, z2) = (pick(b1), pick(b2));
                let d = dims.d_model as f64;
                [&z1 * z1.transpose() / d, &z1 * z2.transpose() / d, &z2 * z2.transpose() / d]
            }
        };
        for (a, s) in acc.iter_mut().zip(&sample) {
            a.push(s);
        }
    }
    Ok(EmpiricalCov {
        blocks: [0, 1, 2].map(|k| acc[k].mean()),
        stderr: [0, 1, 2].map(|k| acc[k].stderr()),
        draws: n_draws,
    })
}

/// Derivative of the activation, used by finite-width NTK checks.
pub fn activation_derivative(kind: Activation) -> fn(f64) -> f64 {
    match kind {
        Activation::Relu => |x: f64| if x > 0.0 { 1.0 } else { 0.0 },
        Activation::Gelu => gelu_derivative,
    }
}
