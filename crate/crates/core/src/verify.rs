//! Oracles and statistical checks.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::editing::reverse_integrate;
use crate::paths::{backward_increments, forward_closed_form, reverse_trajectory, sample_brownian, TimeGrid};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::scores::{Condition, PromptLabel, ScoreOracle};
use crate::{Error, Result, Vector};

/// Minimum sample count accepted by [`marginal_check`].
pub const MIN_MARGINAL_SAMPLES: usize = 100;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Sup-norm distance between the forward path read backwards and the
/// reverse SDE driven by its structured backward increments, integrating
/// from reverse step `start_step`.
pub fn pathwise_reversal_error_from(
    y0: &Vector,
    oracle: &ScoreOracle,
    cond: &Condition,
    sched: &NoiseSchedule,
    steps: usize,
    start_step: usize,
    seed: u64,
) -> Result<f64> {
    mismatched_reversal_error(y0, oracle, cond, cond, sched, steps, start_step, seed)
}

/// Retrace error when the backward increments are built under `build` but
/// the reverse SDE is integrated under `drive`. With `build == drive` the
/// score terms cancel along the path whatever the guidance weight, so only a
/// mismatch between the two conditions breaks the retrace.
#[allow(clippy::too_many_arguments)]
pub fn mismatched_reversal_error(
    y0: &Vector,
    oracle: &ScoreOracle,
    build: &Condition,
    drive: &Condition,
    sched: &NoiseSchedule,
    steps: usize,
    start_step: usize,
    seed: u64,
) -> Result<f64> {
    let grid = TimeGrid::uniform(steps)?;
    let path = sample_brownian(&grid, y0.len(), &mut rng::seeded(seed))?;
    let rev = reverse_trajectory(&forward_closed_form(y0, sched, &grid, &path)?, &grid)?;
    let bw = backward_increments(&path, &rev, oracle, build, sched, &grid, start_step)?;
    let z = reverse_integrate(rev.state(start_step), &bw, oracle, drive, &grid, sched, start_step)?;
    rev.sup_distance_from(&z, start_step)
}

/// [`pathwise_reversal_error_from`] starting at reverse time 0.
pub fn pathwise_reversal_error(
    y0: &Vector,
    oracle: &ScoreOracle,
    cond: &Condition,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    pathwise_reversal_error_from(y0, oracle, cond, sched, steps, 0, seed)
}

/// Inputs of a retrace convergence study. Replicate `i` draws its own
/// `y0 ~ p(· | c)` unless `y0` is fixed.
#[derive(Debug, Clone)]
pub struct ReversalSetup {
    pub oracle: ScoreOracle,
    pub cond: Condition,
    pub sched: NoiseSchedule,
    pub y0: Option<Vector>,
    pub start: StartAt,
    pub base_seed: u64,
}

/// Where the retrace begins: a fixed reverse step, or a fixed reverse time
/// mapped to the first node at or after it on each grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StartAt {
    Step(usize),
    Time(f64),
}

impl StartAt {
    pub fn step(self, steps: usize) -> Result<usize> {
        let k = match self {
            StartAt::Step(k) => k,
            StartAt::Time(t) if (0.0..1.0).contains(&t) => (t * steps as f64).ceil() as usize,
            StartAt::Time(t) => return Err(Error::Invalid(format!("start time {t} outside [0, 1)"))),
        };
        if k >= steps {
            return Err(Error::Invalid(format!("start step {k} leaves no steps out of {steps}")));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub median_error: f64,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Convergence order: the negated least-squares slope of
    /// `log(median error)` against `log(N)`. Absent for a single `N`.
    pub slope: Option<f64>,
}

impl ConvergenceTable {
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].median_error < w[0].median_error)
    }
}

fn replicate_errors(setup: &ReversalSetup, steps: usize, seeds: usize) -> Result<Vec<f64>> {
    let start = setup.start.step(steps)?;
    (0..seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = rng::replicate_seed(setup.base_seed, i);
            let y0 = match &setup.y0 {
                Some(y) => y.clone(),
                None => setup.oracle.sample(&setup.cond.label, &mut rng::stream(seed, 1))?,
            };
            pathwise_reversal_error_from(&y0, &setup.oracle, &setup.cond, &setup.sched, steps, start, seed)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Median retrace error for each step count and the fitted order.
pub fn convergence_study(setup: &ReversalSetup, steps: &[usize], seeds: usize) -> Result<ConvergenceTable> {
    if steps.is_empty() {
        return Err(Error::Invalid("need at least one step count".into()));
    }
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("step counts must be strictly increasing".into()));
    }
    if seeds == 0 {
        return Err(Error::TooFewSamples { min: 1, got: 0 });
    }
    let mut rows = Vec::with_capacity(steps.len());
    for &n in steps {
        let errs = replicate_errors(setup, n, seeds)?;
        rows.push(ConvergenceRow {
            steps: n,
            median_error: median(&errs),
            mean_error: errs.iter().sum::<f64>() / errs.len() as f64,
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.steps as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.median_error.ln()).collect();
    let slope = fit_slope(&lx, &ly).map(|s| -s);
    Ok(ConvergenceTable { rows, slope })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub mean: f64,
    pub variance: f64,
    pub target_mean: f64,
    pub target_variance: f64,
    pub z_mean: f64,
    pub z_variance: f64,
    pub ks: Option<KsResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalReport {
    pub samples: usize,
    pub coordinates: Vec<CoordinateCheck>,
    pub max_abs_z: f64,
    pub pass: bool,
}

/// Per-coordinate z-scores of the sample mean and variance against the
/// target, using standard errors estimated from the samples (the variance
/// SE uses the empirical fourth central moment). Passes iff every `|z| <= 3`.
/// With `gaussian_target` a one-sample KS test against the target normal is
/// reported for information.
pub fn marginal_check(
    samples: &[Vector],
    target_mean: &Vector,
    target_var: &Vector,
    gaussian_target: bool,
) -> Result<MarginalReport> {
    let n = samples.len();
    if n < MIN_MARGINAL_SAMPLES {
        return Err(Error::TooFewSamples {
            min: MIN_MARGINAL_SAMPLES,
            got: n,
        });
    }
    let d = target_mean.len();
    if target_var.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: target_var.len(),
        });
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: bad.len(),
        });
    }
    let nf = n as f64;
    let mut coordinates = Vec::with_capacity(d);
    for i in 0..d {
        let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        let mean = xs.iter().sum::<f64>() / nf;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
        let variance = m2 * nf / (nf - 1.0);
        let z_mean = (mean - target_mean[i]) / (variance / nf).sqrt();
        let z_variance = (variance - target_var[i]) / ((m4 - m2 * m2).max(0.0) / nf).sqrt();
        let ks = if gaussian_target {
            Some(ks_one_sample_normal(&xs, target_mean[i], target_var[i].sqrt())?)
        } else {
            None
        };
        coordinates.push(CoordinateCheck {
            mean,
            variance,
            target_mean: target_mean[i],
            target_variance: target_var[i],
            z_mean,
            z_variance,
            ks,
        });
    }
    let max_abs_z = coordinates
        .iter()
        .flat_map(|c| [c.z_mean.abs(), c.z_variance.abs()])
        .fold(0.0, f64::max);
    let pass = coordinates
        .iter()
        .all(|c| c.z_mean.abs() <= 3.0 && c.z_variance.abs() <= 3.0);
    Ok(MarginalReport {
        samples: n,
        coordinates,
        max_abs_z,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

// Stephens' small-sample correction of the asymptotic law.
fn ks_p_value(d: f64, effective_n: f64) -> f64 {
    let sq = effective_n.sqrt();
    kolmogorov_q((sq + 0.12 + 0.11 / sq) * d)
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Invalid("samples contain NaN".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// One-sample Kolmogorov–Smirnov test against `N(mean, std²)`.
pub fn ks_one_sample_normal(xs: &[f64], mean: f64, std: f64) -> Result<KsResult> {
    if xs.is_empty() {
        return Err(Error::TooFewSamples { min: 1, got: 0 });
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::Invalid(e.to_string()))?;
    let s = sorted(xs)?;
    let n = s.len() as f64;
    let statistic = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        statistic,
        p_value: ks_p_value(statistic, n),
    })
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooFewSamples { min: 1, got: 0 });
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut statistic: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        statistic = statistic.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsResult {
        statistic,
        p_value: ks_p_value(statistic, na * nb / (na + nb)),
    })
}

/// Paired test of `mean(a - b) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedComparison {
    pub mean_difference: f64,
    pub se: f64,
    pub z: f64,
    /// One-sided p-value `P(Z >= z)`.
    pub p_value: f64,
}

pub fn paired_comparison(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(Error::Length {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFewSamples { min: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let z = if se > 0.0 {
        mean / se
    } else if mean > 0.0 {
        f64::INFINITY
    } else if mean < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    let p_value = if se == 0.0 && mean == 0.0 { 1.0 } else { 1.0 - std_normal().cdf(z) };
    Ok(PairedComparison {
        mean_difference: mean,
        se,
        z,
        p_value,
    })
}

/// Largest deviation between the analytic score and central differences of
/// the log density at random `(x, c, t)`, with `x ~ p_t(· | c)`.
pub fn finite_diff_score_check(oracle: &ScoreOracle, sched: &NoiseSchedule, trials: usize, h: f64, seed: u64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!("step h must be positive, got {h}")));
    }
    let labels: Vec<PromptLabel> = oracle.labels().cloned().collect();
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let label = &labels[r.random_range(0..labels.len())];
        let t = r.random_range(0.0..=sched.t_max());
        let x = oracle.sample_marginal(label, t, sched, &mut r)?;
        worst = worst.max(finite_diff_error(oracle, sched, &x, label, t, h)?);
    }
    Ok(worst)
}

/// Max-norm gap between the score and a central difference of the log
/// density at one point.
pub fn finite_diff_error(
    oracle: &ScoreOracle,
    sched: &NoiseSchedule,
    x: &Vector,
    label: &PromptLabel,
    t: f64,
    h: f64,
) -> Result<f64> {
    let s = oracle.score(x, label, t, sched)?;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut hi, mut lo) = (x.clone(), x.clone());
        hi[i] += h;
        lo[i] -= h;
        let fd = (oracle.log_density(&hi, label, t, sched)? - oracle.log_density(&lo, label, t, sched)?) / (2.0 * h);
        worst = worst.max((fd - s[i]).abs());
    }
    Ok(worst)
}

/// `W₂` between two equal-size 1-D samples under the quantile coupling.
pub fn empirical_w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Length {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::TooFewSamples { min: 1, got: 0 });
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let ms = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(ms.sqrt())
}
