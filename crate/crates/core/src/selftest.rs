//! Fast end-to-end checks of the numerical core, runnable from the CLI.
//!
//! Every suite compares an optimised route against an independent one:
//! closed forms against plain Monte Carlo, the `O(T^3)` sampler against the
//! full-covariance sampler, Hadamard traces against explicit Jacobians,
//! max-flow against cut enumeration.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::exec::Exec;
use crate::finite_width::{empirical_covariance, FiniteDims, Tap, TapSpec};
use crate::kernel::dual::{self, gelu};
use crate::kernel::softmax::{self, softmax, softmax_jacobian};
use crate::kernel::{attention_cov_update, dual_activation, Activation, BlockParams, KernelState, McConfig, B11, B12, B22};
use crate::linalg::{self, Matrix, MomentAccumulator};
use crate::rng;
use crate::sampler::{flatten_draw, NaiveJointSampler, PsdRepair, ScorePairSampler};
use crate::tasks::graph::{gen_rgg, mincut_oracle, GeoGraph};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SelftestConfig {
    pub seed: u64,
    pub exec: Exec,
    /// Adds this offset to every ReLU dual value while the suites run, to
    /// confirm the arc-cosine suite catches it.
    pub relu_mutation: Option<f64>,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self { seed: 0, exec: Exec::Parallel, relu_mutation: None }
    }
}

type Suite = fn(&SelftestConfig) -> (bool, String);

pub const SUITES: [(&str, Suite); 7] = [
    ("softmax_bounds", softmax_bounds),
    ("trace_identity", trace_identity),
    ("arc_cosine", arc_cosine),
    ("score_factorization", score_factorization),
    ("sampler_equivalence", sampler_equivalence),
    ("constant_fixed_point", constant_fixed_point),
    ("flow_cut_duality", flow_cut_duality),
];

pub fn run_all(cfg: &SelftestConfig) -> Vec<SuiteReport> {
    if let Some(delta) = cfg.relu_mutation {
        dual::set_relu_perturbation(delta);
    }
    let reports = SUITES
        .iter()
        .map(|(name, suite)| {
            let start = Instant::now();
            let (passed, detail) = suite(cfg);
            SuiteReport { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect();
    if cfg.relu_mutation.is_some() {
        dual::set_relu_perturbation(0.0);
    }
    reports
}

fn random_scores<R: Rng + ?Sized>(t: usize, r: &mut R) -> Vec<f64> {
    let scale: f64 = r.random_range(0.1..10.0);
    (0..t).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

fn l1(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(f64::abs).sum()
}

fn softmax_bounds(cfg: &SelftestConfig) -> (bool, String) {
    let mut r = rng::stream(cfg.seed, &[1]);
    let mut violations = 0;
    for _ in 0..5000 {
        let t = r.random_range(2..=8);
        let a = softmax(&random_scores(t, &mut r));
        let slack = |bound: f64| bound * (1.0 + 1e-12) + 1e-300;
        for c in 0..t {
            violations += usize::from(l1(softmax::gradient(&a, c)) > slack(2.0 * a[c]));
            violations += usize::from(l1(softmax::hessian(&a, c).iter().copied()) > slack(6.0 * a[c]));
            violations += usize::from(l1(softmax::third_derivative(&a, c)) > slack(26.0 * a[c]));
        }
        violations += usize::from(l1(softmax_jacobian(&a).iter().copied()) > slack(2.0));
        let a2 = softmax(&random_scores(t, &mut r));
        let m = linalg::standard_normal(t, t, &mut r);
        let n = linalg::standard_normal(t, t, &mut r);
        let tr = softmax::softmax_jacobian_trace(&a, &a2, &m, &n).unwrap_or(f64::INFINITY);
        violations += usize::from(tr.abs() > slack(4.0 * linalg::max_norm(&m) * linalg::max_norm(&n)));
    }
    (violations == 0, format!("{violations} violations over 5000 vectors"))
}

fn trace_identity(cfg: &SelftestConfig) -> (bool, String) {
    let mut r = rng::stream(cfg.seed, &[2]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let t = r.random_range(1..=12);
        let s1 = linalg::standard_normal(t, t, &mut r);
        let s2 = linalg::standard_normal(t, t, &mut r);
        let m = linalg::standard_normal(t, t, &mut r);
        let n = linalg::standard_normal(t, t, &mut r);
        let (a1, a2) = (softmax::softmax_rows(&s1), softmax::softmax_rows(&s2));
        let fast = softmax::softmax_jacobian_trace_batch(&a1, &a2, &m, &n);
        for i in 0..t {
            for j in 0..t {
                let j1 = softmax_jacobian(&a1.row(i).iter().copied().collect::<Vec<_>>());
                let j2 = softmax_jacobian(&a2.row(j).iter().copied().collect::<Vec<_>>());
                let explicit = (j1.transpose() * &m * j2 * n.transpose()).trace();
                let scale = 1.0 + explicit.abs();
                worst = worst.max((fast[(i, j)] - explicit).abs() / scale);
            }
        }
    }
    (worst <= 1e-10, format!("max relative gap {worst:.2e}"))
}

fn arc_cosine(cfg: &SelftestConfig) -> (bool, String) {
    let mut r = rng::stream(cfg.seed, &[3]);
    let n = 200_000;
    let mut worst: f64 = 0.0;
    for case in 0..8 {
        let k11: f64 = r.random_range(0.2..2.0);
        let k22: f64 = r.random_range(0.2..2.0);
        let rho: f64 = r.random_range(-0.95..0.95);
        let k12 = rho * (k11 * k22).sqrt();
        let (s1, s2) = (k11.sqrt(), k22.sqrt());
        let c = (1.0 - rho * rho).sqrt();
        let mut acc = [MomentAccumulator::new(1, 1), MomentAccumulator::new(1, 1)];
        let mut gelu_acc = MomentAccumulator::new(1, 1);
        for _ in 0..n {
            let z1: f64 = r.sample(StandardNormal);
            let z2: f64 = r.sample(StandardNormal);
            let (u, v) = (s1 * z1, s2 * (rho * z1 + c * z2));
            acc[0].push(&Matrix::from_element(1, 1, u.max(0.0) * v.max(0.0)));
            let step = if u > 0.0 && v > 0.0 { 1.0 } else { 0.0 };
            acc[1].push(&Matrix::from_element(1, 1, step));
            gelu_acc.push(&Matrix::from_element(1, 1, gelu(u) * gelu(v)));
        }
        let relu = dual_activation(k11, k12, k22, &BlockParams::default()).map(|d| (d.value, d.derivative));
        let gelu_params = BlockParams { activation: Activation::Gelu, ..BlockParams::default() };
        let gelu_q = dual_activation(k11, k12, k22, &gelu_params).map(|d| d.value);
        let (Ok((value, derivative)), Ok(gq)) = (relu, gelu_q) else {
            return (false, format!("case {case}: dual evaluation failed"));
        };
        for (est, exact) in [(&acc[0], value), (&acc[1], derivative), (&gelu_acc, gq)] {
            let z = (est.mean()[(0, 0)] - exact).abs() / est.stderr()[(0, 0)];
            worst = worst.max(z);
        }
    }
    (worst <= 5.0, format!("worst deviation {worst:.2} SE"))
}

fn score_factorization(cfg: &SelftestConfig) -> (bool, String) {
    let t = 3;
    let d = 256;
    let mut r = rng::stream(cfg.seed, &[4]);
    let x1 = linalg::standard_normal(t, 8, &mut r);
    let x2 = linalg::standard_normal(t, 8, &mut r);
    let dims = FiniteDims { d_k: d, ..FiniteDims::new(8, d, 1, 1) };
    let spec = TapSpec { exec: cfg.exec, ..TapSpec::new(Tap::Scores, 0, 2000, cfg.seed) };
    let emp = match empirical_covariance(&x1, &x2, &dims, &spec) {
        Ok(e) => e,
        Err(e) => return (false, e.to_string()),
    };
    let (m, se) = emp.cross();
    let sig12 = &x1 * x2.transpose() / 8.0;
    // E[S_ac(X1) S_be(X2)] = Σ'_ab Σ'_ce with Σ' the cross block.
    let mut worst: f64 = 0.0;
    for a in 0..t {
        for c in 0..t {
            for b in 0..t {
                for e in 0..t {
                    let exact = sig12[(a, b)] * sig12[(c, e)];
                    worst = worst.max((m[(a * t + c, b * t + e)] - exact).abs() / se[(a * t + c, b * t + e)]);
                }
            }
        }
    }
    (worst <= 5.0, format!("worst deviation {worst:.2} SE over 81 tuples"))
}

fn random_blocks<R: Rng + ?Sized>(t: usize, r: &mut R) -> (Matrix, Matrix, Matrix) {
    let x = linalg::standard_normal(2 * t, 2 * t + 1, r);
    let joint = &x * x.transpose() / (2 * t + 1) as f64;
    (
        joint.view((0, 0), (t, t)).into_owned(),
        joint.view((0, t), (t, t)).into_owned(),
        joint.view((t, t), (t, t)).into_owned(),
    )
}

fn sampler_equivalence(cfg: &SelftestConfig) -> (bool, String) {
    let t = 3;
    let n = 20_000;
    let mut r = rng::stream(cfg.seed, &[5]);
    let (s11, s12, s22) = random_blocks(t, &mut r);
    let (fast, naive) = match (
        ScorePairSampler::new(&s11, &s12, &s22, PsdRepair::default()),
        NaiveJointSampler::new(&s11, &s12, &s22, PsdRepair::default()),
    ) {
        (Ok(f), Ok(n)) => (f, n),
        _ => return (false, "sampler construction failed".into()),
    };
    let k = 2 * t * t;
    let moments = |draw: &dyn Fn(&mut rng::Rng) -> Vec<f64>, stream: u64| {
        let mut r = rng::stream(cfg.seed, &[5, stream]);
        let mut first = MomentAccumulator::new(k, 1);
        let mut second = MomentAccumulator::new(k, k);
        for _ in 0..n {
            let v = Matrix::from_column_slice(k, 1, &draw(&mut r));
            second.push(&(&v * v.transpose()));
            first.push(&v);
        }
        (first, second)
    };
    let (f1, f2) = moments(&|r| flatten_draw(&fast.draw(r)), 1);
    let (n1, n2) = moments(&|r| flatten_draw(&naive.draw(r)), 2);
    let mut worst: f64 = 0.0;
    for (a, b) in [(&f1, &n1), (&f2, &n2)] {
        let (ma, mb, sa, sb) = (a.mean(), b.mean(), a.stderr(), b.stderr());
        for i in 0..ma.len() {
            let se = (sa[i] * sa[i] + sb[i] * sb[i]).sqrt();
            if se > 0.0 {
                worst = worst.max((ma[i] - mb[i]).abs() / se);
            }
        }
    }
    (worst <= 5.0, format!("worst deviation {worst:.2} SE over {} moments", k + k * k))
}

fn constant_fixed_point(cfg: &SelftestConfig) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for c in [0.0, 0.5, 1.0] {
        for t in [4, 16] {
            let m = Matrix::from_element(t, t, c);
            let state = match KernelState::from_blocks(m.clone(), m.clone(), m) {
                Ok(s) => s,
                Err(e) => return (false, e.to_string()),
            };
            let mc = McConfig { exec: cfg.exec, ..McConfig::new(256, cfg.seed) };
            let out = match attention_cov_update(&state, &mc) {
                Ok(o) => o,
                Err(e) => return (false, e.to_string()),
            };
            for b in [B11, B12, B22] {
                let gap = out.sigma[b].iter().map(|v| (v - c).abs()).fold(0.0, f64::max);
                worst = worst.max(gap);
            }
        }
    }
    (worst <= 1e-12, format!("max gap {worst:.2e}"))
}

/// Minimum over all cuts that keep the source in `S` and the target out.
pub fn enumerate_min_cut(g: &GeoGraph) -> usize {
    let n = g.len();
    let relays = n.saturating_sub(2);
    (0u64..1 << relays)
        .map(|mask| {
            let in_s = |v: usize| v == 0 || (v + 1 != n && mask >> (v - 1) & 1 == 1);
            g.adj
                .iter()
                .enumerate()
                .filter(|(a, _)| in_s(*a))
                .map(|(_, out)| out.iter().filter(|&&b| !in_s(b)).count())
                .sum()
        })
        .min()
        .unwrap_or(0)
}

fn flow_cut_duality(cfg: &SelftestConfig) -> (bool, String) {
    let mut r = rng::stream(cfg.seed, &[7]);
    let mut mismatches = 0;
    for i in 0..100 {
        let Ok(g) = gen_rgg(3 + i % 8, 3.0, 2, true, &mut r) else {
            return (false, "graph generation failed".into());
        };
        mismatches += usize::from(mincut_oracle(&g) != enumerate_min_cut(&g));
    }
    (mismatches == 0, format!("{mismatches} mismatches over 100 graphs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_suite() {
        for rep in run_all(&SelftestConfig::default()) {
            assert!(rep.passed, "{}: {}", rep.name, rep.detail);
        }
    }

    #[test]
    fn mutated_relu_constant_is_caught() {
        let reports = run_all(&SelftestConfig { relu_mutation: Some(0.05), ..SelftestConfig::default() });
        let arc = reports.iter().find(|r| r.name == "arc_cosine").unwrap();
        assert!(!arc.passed, "{}", arc.detail);
    }
}
