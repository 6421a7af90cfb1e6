//! Budget-curve fits and the capture verdict.

use serde::{Deserialize, Serialize};

use super::HarnessError;

const KAPPA_MAX: f64 = 4.0;
const KAPPA_GRID: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Capture,
    NonCapture,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_r2_min")]
    pub r2_min: f64,
    #[serde(default = "default_kappa_min")]
    pub kappa_min: f64,
    /// AIC advantage the power law needs to count as dominating.
    #[serde(default = "default_aic_margin")]
    pub aic_margin: f64,
}

fn default_r2_min() -> f64 {
    0.9
}
fn default_kappa_min() -> f64 {
    0.5
}
fn default_aic_margin() -> f64 {
    2.0
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            r2_min: default_r2_min(),
            kappa_min: default_kappa_min(),
            aic_margin: default_aic_margin(),
        }
    }
}

/// Least-squares `C` for `P ≈ C log(T / T0)` and its `r²`.
pub fn fit_log_curve(points: &[(usize, f64)], t0: usize) -> Result<(f64, f64), HarnessError> {
    if points.len() < 3 {
        return Err(HarnessError::TooFewPoints(points.len()));
    }
    let xs: Vec<f64> = points.iter().map(|&(t, _)| (t as f64 / t0 as f64).ln()).collect();
    let ps: Vec<f64> = points.iter().map(|p| p.1).collect();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let c = if sxx > 0.0 {
        xs.iter().zip(&ps).map(|(x, p)| x * p).sum::<f64>() / sxx
    } else {
        0.0
    };
    let rss: f64 = xs.iter().zip(&ps).map(|(x, p)| (p - c * x).powi(2)).sum();
    Ok((c, r_squared(&ps, rss)))
}

fn r_squared(ps: &[f64], rss: f64) -> f64 {
    let mean = ps.iter().sum::<f64>() / ps.len() as f64;
    let tss: f64 = ps.iter().map(|p| (p - mean).powi(2)).sum();
    if tss > 0.0 {
        1.0 - rss / tss
    } else if rss == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `P ≈ A (T / T0)^κ` with `κ ∈ [0, 4]`: grid search then golden-section
/// refinement, `A` in closed form for each `κ`. Returns `(A, κ, rss)`.
pub fn fit_power_law(points: &[(usize, f64)], t0: usize) -> (f64, f64, f64) {
    let rs: Vec<f64> = points.iter().map(|&(t, _)| t as f64 / t0 as f64).collect();
    let ps: Vec<f64> = points.iter().map(|p| p.1).collect();
    let eval = |k: f64| {
        let z: Vec<f64> = rs.iter().map(|r| r.powf(k)).collect();
        let zz: f64 = z.iter().map(|v| v * v).sum();
        let a = if zz > 0.0 {
            z.iter().zip(&ps).map(|(z, p)| z * p).sum::<f64>() / zz
        } else {
            0.0
        };
        let rss: f64 = z.iter().zip(&ps).map(|(z, p)| (p - a * z).powi(2)).sum();
        (a, rss)
    };
    let step = KAPPA_MAX / KAPPA_GRID as f64;
    let best = (0..=KAPPA_GRID)
        .map(|i| i as f64 * step)
        .min_by(|a, b| eval(*a).1.total_cmp(&eval(*b).1))
        .unwrap_or(0.0);
    let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(KAPPA_MAX));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if eval(m1).1 <= eval(m2).1 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let mid = 0.5 * (lo + hi);
    let k = if eval(mid).1 <= eval(best).1 { mid } else { best };
    let (a, rss) = eval(k);
    (a, k, rss)
}

/// Gaussian-residual AIC with `params` parameters. A zero residual is
/// floored relative to the data scale so exact fits compare finitely.
pub fn aic(rss: f64, ps: &[f64], params: usize) -> f64 {
    let n = ps.len() as f64;
    let scale = 1.0 + ps.iter().map(|p| p * p).sum::<f64>() / n;
    let floor = 1e-12 * scale * n;
    n * (rss.max(floor) / n).ln() + 2.0 * params as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub c: f64,
    pub r2: f64,
    pub power_amplitude: f64,
    pub kappa: f64,
    pub r2_power: f64,
    pub aic_log: f64,
    pub aic_power: f64,
    pub flagged: bool,
    pub verdict: Verdict,
}

/// Non-capture when the power law beats the log fit by the AIC margin with
/// `κ ≥ κ_min`; capture when the log fit reaches `r2_min`, no point is
/// flagged and the power law does not dominate; inconclusive otherwise.
pub fn classify_capture(points: &[(usize, f64)], t0: usize, flagged: bool, th: &Thresholds) -> Result<FitReport, HarnessError> {
    let (c, r2) = fit_log_curve(points, t0)?;
    let ps: Vec<f64> = points.iter().map(|p| p.1).collect();
    let xs: Vec<f64> = points.iter().map(|&(t, _)| (t as f64 / t0 as f64).ln()).collect();
    let rss_log: f64 = xs.iter().zip(&ps).map(|(x, p)| (p - c * x).powi(2)).sum();
    let (amp, kappa, rss_pow) = fit_power_law(points, t0);
    let aic_log = aic(rss_log, &ps, 1);
    let aic_power = aic(rss_pow, &ps, 2);
    let dominated = aic_power + th.aic_margin < aic_log;
    let verdict = if dominated && kappa >= th.kappa_min {
        Verdict::NonCapture
    } else if r2 >= th.r2_min && !flagged && !dominated {
        Verdict::Capture
    } else {
        Verdict::Inconclusive
    };
    Ok(FitReport {
        c,
        r2,
        power_amplitude: amp,
        kappa,
        r2_power: r_squared(&ps, rss_pow),
        aic_log,
        aic_power,
        flagged,
        verdict,
    })
}

/// Wilson score interval at `z = 1`; returns `(p̂, half-width)`.
pub fn wilson(errors: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.5);
    }
    let n = n as f64;
    let p = errors as f64 / n;
    let z2 = 1.0;
    let half = (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    (p, half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    fn grid() -> Vec<usize> {
        (1..=8).map(|i| 8 << i).collect()
    }

    fn series(f: impl Fn(f64) -> f64) -> Vec<(usize, f64)> {
        grid().into_iter().map(|t| (t, f(t as f64))).collect()
    }

    #[test]
    fn noiseless_log_and_zero() {
        let (c, r2) = fit_log_curve(&series(|t| 7.0 * (t / 8.0).ln()), 8).unwrap();
        approx::assert_relative_eq!(c, 7.0, epsilon = 1e-12);
        approx::assert_relative_eq!(r2, 1.0, epsilon = 1e-12);
        let (c0, _) = fit_log_curve(&series(|_| 0.0), 8).unwrap();
        assert_eq!(c0, 0.0);
        assert!(matches!(fit_log_curve(&series(|_| 0.0)[..2], 8), Err(HarnessError::TooFewPoints(2))));
    }

    #[test]
    fn noisy_log_matches_normal_equations() {
        let mut r = rng::stream(3, &[]);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let pts: Vec<(usize, f64)> = grid()
            .into_iter()
            .map(|t| (t, 7.0 * (t as f64 / 8.0).ln() + noise.sample(&mut r)))
            .collect();
        let (c, _) = fit_log_curve(&pts, 8).unwrap();
        // Normal equation for a single regressor through the origin via nalgebra.
        let x = nalgebra::DMatrix::from_fn(8, 1, |i, _| (pts[i].0 as f64 / 8.0).ln());
        let y = nalgebra::DVector::from_fn(8, |i, _| pts[i].1);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        let oracle = xty[0] / xtx[(0, 0)];
        approx::assert_relative_eq!(c, oracle, max_relative = 1e-12);
        assert!((c - 7.0).abs() / 7.0 < 0.1);
    }

    #[test]
    fn verdicts_on_canonical_shapes() {
        let th = Thresholds::default();
        let log = classify_capture(&series(|t| 7.0 * (t / 8.0).ln()), 8, false, &th).unwrap();
        assert_eq!(log.verdict, Verdict::Capture);
        let lin = classify_capture(&series(|t| 3.0 * t / 8.0), 8, false, &th).unwrap();
        assert_eq!(lin.verdict, Verdict::NonCapture);
        approx::assert_relative_eq!(lin.kappa, 1.0, epsilon = 1e-6);
        let flagged = classify_capture(&series(|t| 7.0 * (t / 8.0).ln()), 8, true, &th).unwrap();
        assert_eq!(flagged.verdict, Verdict::Inconclusive);
    }

    /// Log growth over the first four points, then jumps of uneven size.
    pub(crate) fn regime_switch(noise: &[f64]) -> Vec<(usize, f64)> {
        let mut ps: Vec<f64> = grid()[..4].iter().map(|&t| 7.0 * (t as f64 / 8.0).ln()).collect();
        let mut last = ps[3];
        for jump in [3.0, 12.0, 2.0, 20.0] {
            last += jump;
            ps.push(last);
        }
        grid().into_iter().zip(ps).zip(noise).map(|((t, p), e)| (t, p + e)).collect()
    }

    #[test]
    fn regime_switch_is_inconclusive() {
        let th = Thresholds::default();
        let v = classify_capture(&regime_switch(&[0.0; 8]), 8, false, &th).unwrap();
        assert_eq!(v.verdict, Verdict::Inconclusive, "{v:?}");
    }

    #[test]
    fn verdicts_are_stable_across_noise_seeds() {
        let th = Thresholds::default();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let shapes: [&dyn Fn(usize, f64) -> f64; 3] = [
            &|t, e| 7.0 * (t as f64 / 8.0).ln() + e,
            &|t, e| 3.0 * t as f64 / 8.0 + e,
            &|t, e| 0.5 * (t as f64 / 8.0).powf(1.5) + e,
        ];
        let mut flips = 0;
        let mut cases = 0;
        for (s, shape) in shapes.iter().enumerate() {
            for seed in 0..50u64 {
                let verdict = |master: u64| {
                    let mut r = rng::stream(master, &[s as u64, seed]);
                    let pts: Vec<(usize, f64)> = grid().into_iter().map(|t| (t, shape(t, noise.sample(&mut r)))).collect();
                    classify_capture(&pts, 8, false, &th).unwrap().verdict
                };
                cases += 1;
                flips += usize::from(verdict(1) != verdict(2));
            }
        }
        for seed in 0..50u64 {
            let draw = |master: u64| {
                let mut r = rng::stream(master, &[9, seed]);
                let e: Vec<f64> = (0..8).map(|_| noise.sample(&mut r)).collect();
                classify_capture(&regime_switch(&e), 8, false, &th).unwrap().verdict
            };
            cases += 1;
            flips += usize::from(draw(1) != draw(2));
        }
        assert!((flips as f64) < 0.2 * cases as f64, "{flips}/{cases}");
    }

    #[test]
    fn wilson_interval() {
        let (p, h) = wilson(0, 512);
        assert_eq!(p, 0.0);
        assert!(h > 0.0 && h < 0.01);
        let (p, h) = wilson(256, 512);
        assert_eq!(p, 0.5);
        approx::assert_relative_eq!(h, (0.25f64 / 512.0 + 0.25 / 512.0 / 512.0).sqrt() / (1.0 + 1.0 / 512.0), epsilon = 1e-15);
    }
}
