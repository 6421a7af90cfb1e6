//! Two-stage capture sweeps.
//!
//! Stage one trains on instances of size `T0` until the held-out error
//! drops below `delta`. Each later grid point `T` then adds adaptation
//! instances with sizes uniform on `[T_prev, T]` and refits the residual
//! term on the whole adaptation pool, until the error at `T` is below
//! `delta`. The cumulative pool size per grid point is the budget curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::kernel::KernelError;
use crate::linalg::Matrix;
use crate::regression::{one_hot, two_step_adapt, FittedPredictor, KernelSpec, RegressionError};
use crate::rng;
use crate::tasks::embed::{embed_instance, PeMode};
use crate::tasks::{Generator, TaskError, TaskKind, TaskParams};

pub mod fit;
pub mod sweep;

pub use fit::{classify_capture, fit_log_curve, fit_power_law, wilson, FitReport, Thresholds, Verdict};
pub use sweep::{mc_error_sweep, transformer_readout, SweepResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid capture config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("log fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("error sweep needs at least 2 repetitions, got {0}")]
    TooFewReps(usize),
    #[error("checkpoint does not match this run: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default = "default_width")]
    pub d: usize,
    #[serde(default)]
    pub pe: PeMode,
    #[serde(default)]
    pub codebook_seed: u64,
}

fn default_width() -> usize {
    16
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            d: default_width(),
            pe: PeMode::default(),
            codebook_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backend {
    /// Kernel ridge regression; `ridge = None` uses the default ridge.
    Kernel {
        kernel: KernelSpec,
        #[serde(default)]
        ridge: Option<f64>,
    },
    /// Deterministic stand-in whose budgets are known in advance: stage one
    /// passes once it has seen `p0` samples, and size `T` passes once the
    /// pool holds `ceil(c log(T / T0))` samples.
    Scripted {
        c: f64,
        #[serde(default)]
        p0: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureConfig {
    pub version: u32,
    pub task: TaskParams,
    pub delta: f64,
    pub t0: usize,
    pub t_grid: Vec<usize>,
    pub p0_max: usize,
    /// Maximum number of new adaptation samples per grid point.
    pub adapt_cap: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    pub seed: u64,
    pub backend: Backend,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
}

fn default_batch() -> usize {
    8
}
fn default_n_eval() -> usize {
    512
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!("unsupported config version {}", self.version)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if self.t0 < self.task.kind.min_size() {
            return bad("t0 is below the task minimum");
        }
        if self.t_grid.is_empty() || self.t_grid[0] < self.t0 {
            return bad("t_grid must be non-empty and start at or above t0");
        }
        if self.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("t_grid must be strictly increasing");
        }
        if self.batch == 0 || self.n_eval == 0 {
            return bad("batch and n_eval must be positive");
        }
        if let Backend::Scripted { c, .. } = self.backend {
            if !(c.is_finite() && c >= 0.0) {
                return bad("scripted constant must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        *self.t_grid.last().unwrap_or(&self.t0)
    }
}

/// Embedded instance with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Matrix,
    pub class: usize,
    pub value: f64,
    pub size: usize,
}

/// Rows of the model input for an instance of size `t`.
pub fn input_rows(kind: TaskKind, t: usize) -> usize {
    match kind {
        TaskKind::Sort => t + 1,
        TaskKind::StringMatch => t + 1 + crate::tasks::string_match::PATTERN_LEN,
        _ => t,
    }
}

/// Left-pads `m` with zero rows to `rows`, keeping the final tokens aligned.
pub fn left_pad(m: &Matrix, rows: usize) -> Matrix {
    let offset = rows.saturating_sub(m.nrows());
    Matrix::from_fn(rows.max(m.nrows()), m.ncols(), |i, j| if i < offset { 0.0 } else { m[(i - offset, j)] })
}

/// Model trained on embedded samples.
pub trait Learner: Sync {
    type Model: Sync;

    fn fit(&self, train: &[Sample]) -> Result<Self::Model, HarnessError>;

    /// Second stage on the adaptation pool, starting from `base`.
    fn adapt(&self, base: &Self::Model, pool: &[Sample]) -> Result<Self::Model, HarnessError>;

    fn count_errors(&self, model: &Self::Model, eval: &[Sample]) -> Result<usize, HarnessError>;
}

/// Kernel ridge regression: one-hot classification, or scalar regression
/// scored after rounding to the nearest integer.
pub struct KernelLearner {
    pub kernel: KernelSpec,
    pub ridge: Option<f64>,
    pub classes: Option<usize>,
    pub exec: Exec,
}

impl KernelLearner {
    fn targets(&self, data: &[Sample]) -> Matrix {
        match self.classes {
            Some(c) => one_hot(&data.iter().map(|s| s.class).collect::<Vec<_>>(), c),
            None => Matrix::from_fn(data.len(), 1, |i, _| data[i].value),
        }
    }

    fn inputs(data: &[Sample]) -> Vec<Matrix> {
        data.iter().map(|s| s.input.clone()).collect()
    }
}

impl Learner for KernelLearner {
    type Model = FittedPredictor;

    fn fit(&self, train: &[Sample]) -> Result<FittedPredictor, HarnessError> {
        if train.is_empty() {
            return Ok(FittedPredictor::zero(&self.kernel, self.classes.unwrap_or(1), self.classes));
        }
        Ok(FittedPredictor::fit(
            &Self::inputs(train),
            &self.targets(train),
            &self.kernel,
            self.ridge,
            self.classes,
            self.exec,
        )?)
    }

    fn adapt(&self, base: &FittedPredictor, pool: &[Sample]) -> Result<FittedPredictor, HarnessError> {
        Ok(two_step_adapt(base, &Self::inputs(pool), &self.targets(pool), self.ridge, self.exec)?)
    }

    fn count_errors(&self, model: &FittedPredictor, eval: &[Sample]) -> Result<usize, HarnessError> {
        let preds = model.predict_batch(&Self::inputs(eval), self.exec)?;
        Ok(preds
            .iter()
            .zip(eval)
            .filter(|(p, s)| match self.classes {
                Some(_) => p.argmax() != s.class,
                None => p.values[0].round() != s.value,
            })
            .count())
    }
}

pub struct ScriptedLearner {
    pub c: f64,
    pub p0: usize,
    pub t0: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptedModel {
    pub trained: usize,
    pub adapted: Option<usize>,
}

impl ScriptedLearner {
    pub fn required(&self, t: usize) -> usize {
        (self.c * (t as f64 / self.t0 as f64).ln()).ceil().max(0.0) as usize
    }
}

impl Learner for ScriptedLearner {
    type Model = ScriptedModel;

    fn fit(&self, train: &[Sample]) -> Result<ScriptedModel, HarnessError> {
        Ok(ScriptedModel { trained: train.len(), adapted: None })
    }

    fn adapt(&self, base: &ScriptedModel, pool: &[Sample]) -> Result<ScriptedModel, HarnessError> {
        Ok(ScriptedModel { trained: base.trained, adapted: Some(pool.len()) })
    }

    fn count_errors(&self, model: &ScriptedModel, eval: &[Sample]) -> Result<usize, HarnessError> {
        let t = eval.first().map_or(self.t0, |s| s.size);
        let pass = match model.adapted {
            None => model.trained >= self.p0,
            Some(n) => n >= self.required(t),
        };
        Ok(if pass { 0 } else { eval.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    BudgetExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub p0: usize,
    pub error: f64,
    pub stderr: f64,
    pub flags: Vec<Flag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    /// New adaptation samples drawn at this grid point.
    pub samples: usize,
    /// Adaptation pool size after this grid point.
    pub cumulative: usize,
    pub error: f64,
    pub stderr: f64,
    pub flags: Vec<Flag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureCurve {
    pub t0: usize,
    pub stage1: StageResult,
    pub points: Vec<CurvePoint>,
    /// Absent with fewer than three grid points.
    pub fit: Option<FitReport>,
    pub verdict: Verdict,
}

impl CaptureCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,samples,cumulative_P,error,stderr,flags\n");
        for p in &self.points {
            let flags: Vec<&str> = p.flags.iter().map(|f| match f {
                Flag::BudgetExhausted => "budget_exhausted",
            }).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.t,
                p.samples,
                p.cumulative,
                p.error,
                p.stderr,
                flags.join(";")
            ));
        }
        out
    }
}

/// State after each completed grid point. Models are refit from the
/// recorded budgets on resume, so only counts are stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub stage1: StageResult,
    pub points: Vec<CurvePoint>,
}

pub enum RunOutcome {
    Complete(CaptureCurve),
    /// The progress callback asked to stop.
    Stopped(Checkpoint),
}

mod stream {
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const ADAPT: u64 = 3;
}

struct Attempt<M> {
    n: usize,
    model: M,
    errors: usize,
}

/// One capture run over a fixed config and learner.
pub struct Harness<'a, L: Learner> {
    cfg: &'a CaptureConfig,
    learner: &'a L,
    generator: Generator,
    rows: usize,
    exec: Exec,
}

impl<'a, L: Learner> Harness<'a, L> {
    pub fn new(cfg: &'a CaptureConfig, learner: &'a L, exec: Exec) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let generator = Generator::new(cfg.task.clone(), cfg.t_max())?;
        Ok(Self {
            rows: input_rows(cfg.task.kind, cfg.t_max()),
            cfg,
            learner,
            generator,
            exec,
        })
    }

    fn sample_from_seed(&self, t: usize, seed: u64, positive: bool) -> Result<Sample, HarnessError> {
        let inst = self.generator.instance_from_seed(t, seed, positive)?;
        let e = &self.cfg.embedding;
        let x = embed_instance(&inst, e.d, e.pe, e.codebook_seed)?;
        Ok(Sample {
            input: left_pad(&x, self.rows),
            class: inst.class_target(),
            value: inst.scalar_target(),
            size: t,
        })
    }

    fn samples<F>(&self, range: std::ops::Range<usize>, f: F) -> Result<Vec<Sample>, HarnessError>
    where
        F: Fn(usize) -> Result<Sample, HarnessError> + Sync + Send,
    {
        let start = range.start;
        self.exec.map(range.len(), |i| f(start + i)).into_iter().collect()
    }

    fn train_samples(&self, range: std::ops::Range<usize>) -> Result<Vec<Sample>, HarnessError> {
        let (seed, t0) = (self.cfg.seed, self.cfg.t0);
        self.samples(range, |i| {
            let s = rng::derive(seed, &[rng::domain::HARNESS, stream::TRAIN, i as u64]);
            self.sample_from_seed(t0, s, i % 2 == 0)
        })
    }

    pub fn eval_samples(&self, t: usize) -> Result<Vec<Sample>, HarnessError> {
        let seed = self.cfg.seed;
        self.samples(0..self.cfg.n_eval, |i| {
            let s = rng::derive(seed, &[rng::domain::HARNESS, stream::EVAL, t as u64, i as u64]);
            self.sample_from_seed(t, s, i % 2 == 0)
        })
    }

    fn adapt_samples(&self, grid: usize, range: std::ops::Range<usize>) -> Result<Vec<Sample>, HarnessError> {
        let t = self.cfg.t_grid[grid];
        let t_prev = if grid == 0 { self.cfg.t0 } else { self.cfg.t_grid[grid - 1] };
        let seed = self.cfg.seed;
        self.samples(range, |i| {
            let s = rng::derive(seed, &[rng::domain::HARNESS, stream::ADAPT, grid as u64, i as u64]);
            let size = {
                use rand::Rng;
                rng::stream(s, &[0]).random_range(t_prev..=t)
            };
            self.sample_from_seed(size, s, i % 2 == 0)
        })
    }

    fn passes(&self, errors: usize) -> bool {
        (errors as f64 / self.cfg.n_eval as f64) < self.cfg.delta
    }

    /// Grows the sample count in batches up to `cap`. When a failing count
    /// `known_fail` is known below the first passing batch, the crossing is
    /// refined by bisection. Returns the chosen attempt and whether the cap
    /// was hit without passing.
    fn search<F>(&self, cap: usize, known_fail: Option<Attempt<L::Model>>, mut eval: F) -> Result<(Attempt<L::Model>, bool), HarnessError>
    where
        F: FnMut(usize) -> Result<Attempt<L::Model>, HarnessError>,
    {
        let mut lo = known_fail.as_ref().map(|a| a.n);
        let mut last = known_fail;
        let mut n = lo.unwrap_or(0);
        loop {
            if n >= cap {
                let a = match last {
                    Some(a) => a,
                    None => eval(cap)?,
                };
                let pass = self.passes(a.errors);
                return Ok((a, !pass));
            }
            let next = (n + self.cfg.batch).min(cap);
            let a = eval(next)?;
            if self.passes(a.errors) {
                let Some(mut fail) = lo else {
                    return Ok((a, false));
                };
                let mut best = a;
                while best.n - fail > 1 {
                    let mid = fail + (best.n - fail) / 2;
                    let m = eval(mid)?;
                    if self.passes(m.errors) {
                        best = m;
                    } else {
                        fail = mid;
                    }
                }
                return Ok((best, false));
            }
            lo = Some(next);
            n = next;
            last = Some(a);
        }
    }

    /// Stage one at `T0`. The first batch is accepted as is when it already
    /// passes; later crossings are refined within their batch.
    pub fn stage1_train(&self) -> Result<(L::Model, StageResult), HarnessError> {
        let train = self.train_samples(0..self.cfg.p0_max)?;
        let eval = self.eval_samples(self.cfg.t0)?;
        let (a, exhausted) = self.search(self.cfg.p0_max, None, |n| {
            let model = self.learner.fit(&train[..n])?;
            let errors = self.learner.count_errors(&model, &eval)?;
            Ok(Attempt { n, model, errors })
        })?;
        let (error, stderr) = wilson(a.errors, eval.len());
        let flags = if exhausted { vec![Flag::BudgetExhausted] } else { vec![] };
        Ok((a.model, StageResult { p0: a.n, error, stderr, flags }))
    }

    /// Grid point `grid`: extends `pool` with new adaptation samples until
    /// the error at `T` is below `delta` or the cap is reached.
    pub fn adapt_step(&self, f1: &L::Model, pool: &mut Vec<Sample>, grid: usize) -> Result<(L::Model, CurvePoint), HarnessError> {
        let t = self.cfg.t_grid[grid];
        let base = pool.len();
        let cap = self.cfg.adapt_cap;
        let fresh = self.adapt_samples(grid, 0..cap)?;
        pool.extend(fresh);
        let eval = self.eval_samples(t)?;
        let attempt = |n: usize| -> Result<Attempt<L::Model>, HarnessError> {
            let model = self.learner.adapt(f1, &pool[..base + n])?;
            let errors = self.learner.count_errors(&model, &eval)?;
            Ok(Attempt { n, model, errors })
        };
        let zero = attempt(0)?;
        let (a, exhausted) = if self.passes(zero.errors) {
            (zero, false)
        } else {
            self.search(cap, Some(zero), attempt)?
        };
        pool.truncate(base + a.n);
        let (error, stderr) = wilson(a.errors, eval.len());
        let point = CurvePoint {
            t,
            samples: a.n,
            cumulative: base + a.n,
            error,
            stderr,
            flags: if exhausted { vec![Flag::BudgetExhausted] } else { vec![] },
        };
        Ok((a.model, point))
    }

    /// Full sweep. `on_point` sees the checkpoint after every grid point and
    /// returns `false` to stop early. `resume` continues from a checkpoint
    /// written by an earlier run of the same config.
    pub fn run(
        &self,
        config_hash: &str,
        resume: Option<Checkpoint>,
        on_point: &mut dyn FnMut(&Checkpoint) -> bool,
    ) -> Result<RunOutcome, HarnessError> {
        let (f1, mut ckpt) = match resume {
            Some(c) => {
                if c.config_hash != config_hash {
                    return Err(HarnessError::Checkpoint("config hash differs".into()));
                }
                if c.points.len() > self.cfg.t_grid.len()
                    || c.points.iter().zip(&self.cfg.t_grid).any(|(p, &t)| p.t != t)
                {
                    return Err(HarnessError::Checkpoint("grid points differ".into()));
                }
                let f1 = self.learner.fit(&self.train_samples(0..c.stage1.p0)?)?;
                (f1, c)
            }
            None => {
                let (f1, stage1) = self.stage1_train()?;
                let c = Checkpoint {
                    config_hash: config_hash.to_string(),
                    stage1,
                    points: Vec::new(),
                };
                (f1, c)
            }
        };
        let mut pool = Vec::new();
        for (g, p) in ckpt.points.iter().enumerate() {
            pool.extend(self.adapt_samples(g, 0..p.samples)?);
        }
        for g in ckpt.points.len()..self.cfg.t_grid.len() {
            let (_, point) = self.adapt_step(&f1, &mut pool, g)?;
            ckpt.points.push(point);
            if !on_point(&ckpt) && g + 1 < self.cfg.t_grid.len() {
                return Ok(RunOutcome::Stopped(ckpt));
            }
        }
        Ok(RunOutcome::Complete(self.finish(ckpt)?))
    }

    fn finish(&self, ckpt: Checkpoint) -> Result<CaptureCurve, HarnessError> {
        let pts: Vec<(usize, f64)> = ckpt.points.iter().map(|p| (p.t, p.cumulative as f64)).collect();
        let flagged = !ckpt.stage1.flags.is_empty() || ckpt.points.iter().any(|p| !p.flags.is_empty());
        let fit = if pts.len() >= 3 {
            Some(classify_capture(&pts, self.cfg.t0, flagged, &self.cfg.thresholds)?)
        } else {
            None
        };
        Ok(CaptureCurve {
            t0: self.cfg.t0,
            verdict: fit.as_ref().map_or(Verdict::Inconclusive, |f| f.verdict),
            stage1: ckpt.stage1,
            points: ckpt.points,
            fit,
        })
    }
}

/// Runs a config end to end with its configured backend.
pub fn run_capture(
    cfg: &CaptureConfig,
    config_hash: &str,
    exec: Exec,
    resume: Option<Checkpoint>,
    on_point: &mut dyn FnMut(&Checkpoint) -> bool,
) -> Result<RunOutcome, HarnessError> {
    match &cfg.backend {
        Backend::Kernel { kernel, ridge } => {
            let learner = KernelLearner {
                kernel: kernel.clone(),
                ridge: *ridge,
                classes: cfg.task.classes(),
                exec,
            };
            Harness::new(cfg, &learner, exec)?.run(config_hash, resume, on_point)
        }
        Backend::Scripted { c, p0 } => {
            let learner = ScriptedLearner { c: *c, p0: *p0, t0: cfg.t0 };
            Harness::new(cfg, &learner, exec)?.run(config_hash, resume, on_point)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::BlockParams;

    fn scripted(c: f64, p0: usize) -> CaptureConfig {
        CaptureConfig {
            version: CONFIG_VERSION,
            task: TaskParams::new(TaskKind::StringMatch),
            delta: 0.2,
            t0: 8,
            t_grid: vec![12, 16, 24, 32, 48, 64, 96, 128],
            p0_max: 64,
            adapt_cap: 64,
            batch: 8,
            n_eval: 4,
            seed: 1,
            backend: Backend::Scripted { c, p0 },
            embedding: EmbeddingConfig::default(),
            thresholds: Thresholds::default(),
        }
    }

    fn complete(cfg: &CaptureConfig) -> CaptureCurve {
        match run_capture(cfg, "h", Exec::Parallel, None, &mut |_| true).unwrap() {
            RunOutcome::Complete(c) => c,
            RunOutcome::Stopped(_) => unreachable!(),
        }
    }

    #[test]
    fn scripted_budgets_are_recorded_exactly() {
        let cfg = scripted(5.0, 3);
        let curve = complete(&cfg);
        assert_eq!(curve.stage1.p0, 8);
        let learner = ScriptedLearner { c: 5.0, p0: 3, t0: 8 };
        let mut prev = 0;
        for p in &curve.points {
            let need = learner.required(p.t);
            assert_eq!(p.cumulative, need.max(prev), "T = {}", p.t);
            assert!(p.cumulative >= prev);
            prev = p.cumulative;
        }
        let fit = curve.fit.unwrap();
        assert!((fit.c - 5.0).abs() / 5.0 < 0.1, "{fit:?}");
        assert_eq!(curve.verdict, Verdict::Capture);
    }

    #[test]
    fn cap_zero_flags_every_failing_point() {
        let mut cfg = scripted(5.0, 0);
        cfg.adapt_cap = 0;
        let curve = complete(&cfg);
        assert!(curve.points.iter().all(|p| p.flags == vec![Flag::BudgetExhausted] && p.cumulative == 0));
        assert_eq!(curve.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn stage_one_budget_exhaustion_is_reported() {
        let cfg = scripted(1.0, 1000);
        let curve = complete(&cfg);
        assert_eq!(curve.stage1.p0, 64);
        assert_eq!(curve.stage1.flags, vec![Flag::BudgetExhausted]);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let cfg = scripted(6.0, 0);
        let full = complete(&cfg);
        let mut stop_after = 3;
        let ckpt = match run_capture(&cfg, "h", Exec::Sequential, None, &mut |_| {
            stop_after -= 1;
            stop_after > 0
        })
        .unwrap()
        {
            RunOutcome::Stopped(c) => c,
            RunOutcome::Complete(_) => panic!("expected a stop"),
        };
        assert_eq!(ckpt.points.len(), 3);
        let resumed = match run_capture(&cfg, "h", Exec::Parallel, Some(ckpt.clone()), &mut |_| true).unwrap() {
            RunOutcome::Complete(c) => c,
            RunOutcome::Stopped(_) => unreachable!(),
        };
        assert_eq!(resumed, full);
        assert!(matches!(
            run_capture(&cfg, "other", Exec::Parallel, Some(ckpt), &mut |_| true),
            Err(HarnessError::Checkpoint(_))
        ));
    }

    fn kernel_cfg(kind: TaskKind) -> CaptureConfig {
        CaptureConfig {
            task: TaskParams::new(kind),
            t_grid: vec![10, 12, 16],
            p0_max: 32,
            adapt_cap: 16,
            n_eval: 64,
            backend: Backend::Kernel {
                kernel: KernelSpec::Fcn { depth: 2, params: BlockParams::default() },
                ridge: None,
            },
            ..scripted(0.0, 0)
        }
    }

    #[test]
    fn constant_label_task_needs_one_batch() {
        // Perfect as soon as it has seen any sample, like a constant target.
        let cfg = kernel_cfg(TaskKind::StringMatch);
        struct Constant;
        impl Learner for Constant {
            type Model = usize;
            fn fit(&self, train: &[Sample]) -> Result<usize, HarnessError> {
                Ok(train.len())
            }
            fn adapt(&self, base: &usize, _: &[Sample]) -> Result<usize, HarnessError> {
                Ok(*base)
            }
            fn count_errors(&self, m: &usize, eval: &[Sample]) -> Result<usize, HarnessError> {
                Ok(if *m > 0 { 0 } else { eval.len() })
            }
        }
        let h = Harness::new(&cfg, &Constant, Exec::Parallel).unwrap();
        let (_, s) = h.stage1_train().unwrap();
        assert_eq!(s.p0, cfg.batch);
        assert!(s.flags.is_empty());
    }

    #[test]
    fn chance_level_delta_passes_at_the_first_batch() {
        let mut cfg = kernel_cfg(TaskKind::StringMatch);
        cfg.delta = 0.5 + 1e-3 + 0.2;
        let learner = KernelLearner {
            kernel: KernelSpec::Fcn { depth: 2, params: BlockParams::default() },
            ridge: None,
            classes: Some(2),
            exec: Exec::Parallel,
        };
        let h = Harness::new(&cfg, &learner, Exec::Parallel).unwrap();
        let (_, s) = h.stage1_train().unwrap();
        assert_eq!(s.p0, cfg.batch);
    }

    #[test]
    fn kernel_runs_are_deterministic() {
        for kind in [TaskKind::Induction, TaskKind::Spp] {
            let mut cfg = kernel_cfg(kind);
            cfg.task.vocab = 8;
            let a = match run_capture(&cfg, "h", Exec::Parallel, None, &mut |_| true).unwrap() {
                RunOutcome::Complete(c) => c,
                _ => unreachable!(),
            };
            let b = match run_capture(&cfg, "h", Exec::Sequential, None, &mut |_| true).unwrap() {
                RunOutcome::Complete(c) => c,
                _ => unreachable!(),
            };
            assert_eq!(a.to_csv(), b.to_csv());
            assert_eq!(a, b);
            assert!(a.points.iter().all(|p| (0.0..=1.0).contains(&p.error)));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = scripted(1.0, 0);
        cfg.t_grid = vec![16, 12];
        assert!(cfg.validate().is_err());
        cfg.t_grid = vec![4, 12];
        assert!(cfg.validate().is_err());
        let mut cfg = scripted(1.0, 0);
        cfg.delta = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn left_padding_keeps_the_last_row_last() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = left_pad(&m, 4);
        assert_eq!(p.row(0).iter().sum::<f64>(), 0.0);
        assert_eq!(p[(3, 1)], 4.0);
    }
}
