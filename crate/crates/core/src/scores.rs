//! Analytic conditional score oracles.
//!
//! Data distributions `p(· | c)` are isotropic Gaussians or mixtures of them,
//! keyed by a prompt label. Under the forward OU process a component
//! `N(μ, σ² I)` at time 0 becomes `N(m(t) μ, (m(t)² σ² + V(t)) I)` at time
//! `t`, so every time-`t` score is available in closed form.
//!
//! Time convention: forward time `t` runs from data (0) to noise (1); reverse
//! time is `1 - t`. Only [`rf_reverse_velocity`] and [`rf_sde_drift`] take
//! reverse time.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::standard_normal_vector;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result, Vector};

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptLabel(pub String);

impl PromptLabel {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PromptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PromptLabel {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// A label together with the guidance weight applied to its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label: PromptLabel,
    pub guidance: f64,
}

impl Condition {
    /// Unguided condition (`w = 1`).
    pub fn plain(label: impl Into<PromptLabel>) -> Self {
        Self {
            label: label.into(),
            guidance: 1.0,
        }
    }

    pub fn guided(label: impl Into<PromptLabel>, guidance: f64) -> Self {
        Self {
            label: label.into(),
            guidance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vector,
    pub std: f64,
}

impl GaussianComponent {
    fn marginal(&self, m: f64, v: f64) -> (Vector, f64) {
        (&self.mean * m, m * m * self.std * self.std + v)
    }
}

/// One isotropic Gaussian per label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalGaussianFamily {
    dim: usize,
    labels: BTreeMap<PromptLabel, (Vector, f64)>,
}

impl ConditionalGaussianFamily {
    pub fn new(entries: impl IntoIterator<Item = (PromptLabel, Vector, f64)>) -> Result<Self> {
        let mut labels = BTreeMap::new();
        let mut dim = None;
        for (label, mean, std) in entries {
            check_component(&label, &mean, std, &mut dim)?;
            if labels.insert(label.clone(), (mean, std)).is_some() {
                return Err(Error::Family(format!("label `{label}` declared twice")));
            }
        }
        let dim = dim.ok_or_else(|| Error::Family("family needs at least one label".into()))?;
        Ok(Self { dim, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> impl Iterator<Item = &PromptLabel> {
        self.labels.keys()
    }

    pub fn get(&self, label: &PromptLabel) -> Result<(&Vector, f64)> {
        self.labels
            .get(label)
            .map(|(m, s)| (m, *s))
            .ok_or_else(|| Error::UnknownLabel(label.0.clone()))
    }
}

/// A weighted list of isotropic Gaussians per label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalMixtureFamily {
    dim: usize,
    labels: BTreeMap<PromptLabel, Vec<GaussianComponent>>,
}

impl ConditionalMixtureFamily {
    pub fn new(entries: impl IntoIterator<Item = (PromptLabel, Vec<GaussianComponent>)>) -> Result<Self> {
        let mut labels = BTreeMap::new();
        let mut dim = None;
        for (label, comps) in entries {
            if comps.is_empty() {
                return Err(Error::Family(format!("label `{label}` has no components")));
            }
            let mut total = 0.0;
            for c in &comps {
                if !(c.weight.is_finite() && c.weight > 0.0) {
                    return Err(Error::Family(format!(
                        "label `{label}`: weights must be positive, got {}",
                        c.weight
                    )));
                }
                check_component(&label, &c.mean, c.std, &mut dim)?;
                total += c.weight;
            }
            if (total - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::Family(format!(
                    "label `{label}`: weights sum to {total}, expected 1"
                )));
            }
            if labels.insert(label.clone(), comps).is_some() {
                return Err(Error::Family(format!("label `{label}` declared twice")));
            }
        }
        let dim = dim.ok_or_else(|| Error::Family("family needs at least one label".into()))?;
        Ok(Self { dim, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn check_component(label: &PromptLabel, mean: &Vector, std: f64, dim: &mut Option<usize>) -> Result<()> {
    if mean.is_empty() {
        return Err(Error::Family(format!("label `{label}` has an empty mean")));
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Family(format!("label `{label}` has a non-finite mean")));
    }
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::Family(format!("label `{label}`: std must be positive, got {std}")));
    }
    match dim {
        Some(d) if *d != mean.len() => Err(Error::Dimension {
            expected: *d,
            got: mean.len(),
        }),
        _ => {
            *dim = Some(mean.len());
            Ok(())
        }
    }
}

/// Exact score oracle over a labelled family.
///
/// The unconditional pool used by guidance is the equal-weight mixture over
/// all labels. Evaluation is pure, so an oracle can be shared across threads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreOracle {
    dim: usize,
    labels: BTreeMap<PromptLabel, Vec<GaussianComponent>>,
    pool: Vec<GaussianComponent>,
}

impl From<ConditionalGaussianFamily> for ScoreOracle {
    fn from(f: ConditionalGaussianFamily) -> Self {
        let labels = f
            .labels
            .into_iter()
            .map(|(l, (mean, std))| {
                (
                    l,
                    vec![GaussianComponent {
                        weight: 1.0,
                        mean,
                        std,
                    }],
                )
            })
            .collect();
        Self::build(f.dim, labels)
    }
}

impl From<ConditionalMixtureFamily> for ScoreOracle {
    fn from(f: ConditionalMixtureFamily) -> Self {
        Self::build(f.dim, f.labels)
    }
}

impl ScoreOracle {
    fn build(dim: usize, labels: BTreeMap<PromptLabel, Vec<GaussianComponent>>) -> Self {
        let share = 1.0 / labels.len() as f64;
        let pool = labels
            .values()
            .flatten()
            .map(|c| GaussianComponent {
                weight: c.weight * share,
                ..c.clone()
            })
            .collect();
        Self { dim, labels, pool }
    }

    /// Single-label Gaussian oracle.
    pub fn gaussian(label: impl Into<PromptLabel>, mean: Vector, std: f64) -> Result<Self> {
        Ok(ConditionalGaussianFamily::new([(label.into(), mean, std)])?.into())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> impl Iterator<Item = &PromptLabel> {
        self.labels.keys()
    }

    pub fn components(&self, label: &PromptLabel) -> Result<&[GaussianComponent]> {
        self.labels
            .get(label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLabel(label.0.clone()))
    }

    /// Unconditional pool.
    pub fn pool(&self) -> &[GaussianComponent] {
        &self.pool
    }

    fn check_x(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn kernels(t: f64, sched: &NoiseSchedule) -> Result<(f64, f64)> {
        sched.check_time(t)?;
        Ok((sched.decay_m(t)?, sched.perturbation_variance(t)?))
    }

    /// `∇_x log p_t(x | c)`.
    pub fn score(&self, x: &Vector, label: &PromptLabel, t: f64, sched: &NoiseSchedule) -> Result<Vector> {
        self.check_x(x)?;
        let comps = self.components(label)?;
        let (m, v) = Self::kernels(t, sched)?;
        Ok(mixture_score(comps, x, m, v))
    }

    /// Score of the unconditional pool.
    pub fn unconditional_score(&self, x: &Vector, t: f64, sched: &NoiseSchedule) -> Result<Vector> {
        self.check_x(x)?;
        let (m, v) = Self::kernels(t, sched)?;
        Ok(mixture_score(&self.pool, x, m, v))
    }

    /// `s_u + w (s_c - s_u)`; returns the conditional score itself for `w = 1`.
    pub fn guided_score(&self, x: &Vector, cond: &Condition, t: f64, sched: &NoiseSchedule) -> Result<Vector> {
        let sc = self.score(x, &cond.label, t, sched)?;
        if cond.guidance == 1.0 {
            return Ok(sc);
        }
        let su = self.unconditional_score(x, t, sched)?;
        Ok(&su + (sc - &su) * cond.guidance)
    }

    /// `log p_t(x | c)`.
    pub fn log_density(&self, x: &Vector, label: &PromptLabel, t: f64, sched: &NoiseSchedule) -> Result<f64> {
        self.check_x(x)?;
        let comps = self.components(label)?;
        let (m, v) = Self::kernels(t, sched)?;
        let logs: Vec<f64> = comps.iter().map(|c| weighted_log_pdf(c, x, m, v)).collect();
        Ok(log_sum_exp(&logs))
    }

    /// Draw from `p(· | c)` at time 0.
    pub fn sample<R: Rng + ?Sized>(&self, label: &PromptLabel, rng: &mut R) -> Result<Vector> {
        let comps = self.components(label)?;
        Ok(draw(comps, 1.0, 0.0, self.dim, rng))
    }

    /// Draw from the forward marginal `p_t(· | c)`.
    pub fn sample_marginal<R: Rng + ?Sized>(
        &self,
        label: &PromptLabel,
        t: f64,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Vector> {
        let comps = self.components(label)?;
        let (m, v) = Self::kernels(t, sched)?;
        Ok(draw(comps, m, v, self.dim, rng))
    }

    /// Per-coordinate mean and variance of `p_t(· | c)`.
    pub fn marginal_moments(&self, label: &PromptLabel, t: f64, sched: &NoiseSchedule) -> Result<(Vector, Vector)> {
        let comps = self.components(label)?;
        let (m, v) = Self::kernels(t, sched)?;
        let mut mean = Vector::zeros(self.dim);
        let mut second = Vector::zeros(self.dim);
        for c in comps {
            let (mu, var) = c.marginal(m, v);
            mean.axpy(c.weight, &mu, 1.0);
            second += mu.map(|u| c.weight * (u * u + var));
        }
        let var = second - mean.map(|u| u * u);
        Ok((mean, var))
    }

    /// Mean and isotropic variance of `p_t(· | c)` when it is a single Gaussian.
    pub fn marginal_gaussian(&self, label: &PromptLabel, t: f64, sched: &NoiseSchedule) -> Result<Option<(Vector, f64)>> {
        let comps = self.components(label)?;
        let (m, v) = Self::kernels(t, sched)?;
        Ok(match comps {
            [c] => Some(c.marginal(m, v)),
            _ => None,
        })
    }
}

fn weighted_log_pdf(c: &GaussianComponent, x: &Vector, m: f64, v: f64) -> f64 {
    let (mu, var) = c.marginal(m, v);
    let d = x.len() as f64;
    c.weight.ln() - 0.5 * d * (2.0 * PI * var).ln() - (x - mu).norm_squared() / (2.0 * var)
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

// Responsibility-weighted component scores.
fn mixture_score(comps: &[GaussianComponent], x: &Vector, m: f64, v: f64) -> Vector {
    if let [c] = comps {
        let (mu, var) = c.marginal(m, v);
        return -(x - mu) / var;
    }
    let logs: Vec<f64> = comps.iter().map(|c| weighted_log_pdf(c, x, m, v)).collect();
    let norm = log_sum_exp(&logs);
    let mut out = Vector::zeros(x.len());
    for (c, l) in comps.iter().zip(&logs) {
        let r = (l - norm).exp();
        if r == 0.0 {
            continue;
        }
        let (mu, var) = c.marginal(m, v);
        out.axpy(-r / var, &(x - mu), 1.0);
    }
    out
}

fn draw<R: Rng + ?Sized>(comps: &[GaussianComponent], m: f64, v: f64, dim: usize, rng: &mut R) -> Vector {
    let c = if comps.len() == 1 {
        &comps[0]
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        comps
            .iter()
            .find(|c| {
                acc += c.weight;
                u < acc
            })
            .unwrap_or_else(|| comps.last().unwrap())
    };
    let (mu, var) = c.marginal(m, v);
    mu + standard_normal_vector(dim, rng) * var.sqrt()
}

/// Forward marginal-flow velocity of the Gaussian path
/// `μ_t = (1-t) μ`, `s_t² = (1-t)² σ² + t²`:
///
/// `v(x, t) = -μ + (ṡ_t / s_t)(x - μ_t)` with `ṡ_t / s_t = (t - (1-t) σ²) / s_t²`.
///
/// Transports samples from data (t = 0) toward noise (t = 1).
pub fn rf_velocity(family: &ConditionalGaussianFamily, x: &Vector, label: &PromptLabel, t: f64) -> Result<Vector> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain { t, t_max: 1.0 });
    }
    let (mu, sigma) = family.get(label)?;
    if x.len() != family.dim {
        return Err(Error::Dimension {
            expected: family.dim,
            got: x.len(),
        });
    }
    let u = 1.0 - t;
    let s2 = u * u * sigma * sigma + t * t;
    let rate = (t - u * sigma * sigma) / s2;
    Ok((x - mu * u) * rate - mu)
}

/// Velocity in reverse time (noise to data): `v_rev(x, t_rev) = -v(x, 1 - t_rev)`.
pub fn rf_reverse_velocity(
    family: &ConditionalGaussianFamily,
    x: &Vector,
    label: &PromptLabel,
    t_rev: f64,
) -> Result<Vector> {
    if !(t_rev > 0.0 && t_rev <= 1.0) {
        return Err(Error::Domain { t: t_rev, t_max: 1.0 });
    }
    Ok(-rf_velocity(family, x, label, 1.0 - t_rev)?)
}

/// Reverse-time velocity implied by a score oracle on a rectified-flow
/// schedule: `v_rev = α(1 - t_rev) x + ½ g²(1 - t_rev) ∇ log p`.
pub fn score_reverse_velocity(
    oracle: &ScoreOracle,
    x: &Vector,
    cond: &Condition,
    t_rev: f64,
    sched: &NoiseSchedule,
) -> Result<Vector> {
    let tau = 1.0 - t_rev;
    let (alpha, g) = (sched.alpha(tau)?, sched.diffusion(tau)?);
    let s = oracle.guided_score(x, cond, tau, sched)?;
    Ok(x * alpha + s * (0.5 * g * g))
}

/// Reverse SDE drift in velocity form, `2 v_rev(x, t_rev) - α(1 - t_rev) x`.
///
/// `vel` must be in the reverse-time convention. The drift equals the
/// score-form drift `α x + g² ∇ log p` evaluated at forward time `1 - t_rev`.
pub fn rf_sde_drift<F>(vel: F, x: &Vector, label: &PromptLabel, t_rev: f64, sched: &NoiseSchedule) -> Result<Vector>
where
    F: Fn(&Vector, &PromptLabel, f64) -> Result<Vector>,
{
    if !sched.is_rectified() {
        return Err(Error::Schedule("velocity-form drift needs a rectified-flow schedule".into()));
    }
    if !(t_rev > 0.0 && t_rev <= 1.0) {
        return Err(Error::Domain { t: t_rev, t_max: 1.0 });
    }
    let alpha = sched.alpha(1.0 - t_rev)?;
    let v = vel(x, label, t_rev)?;
    Ok(v * 2.0 - x * alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn std_normal() -> ScoreOracle {
        ScoreOracle::gaussian("a", dvector![0.0], 1.0).unwrap()
    }

    fn two_labels() -> ScoreOracle {
        ConditionalGaussianFamily::new([
            ("src".into(), dvector![-1.0, 0.5], 0.7),
            ("tar".into(), dvector![2.0, -1.0], 1.3),
        ])
        .unwrap()
        .into()
    }

    fn mixture() -> ScoreOracle {
        let comp = |w, m: Vector, s| GaussianComponent { weight: w, mean: m, std: s };
        ConditionalMixtureFamily::new([
            (
                "bi".into(),
                vec![comp(0.3, dvector![-2.0, 0.0], 0.5), comp(0.7, dvector![1.5, 1.0], 0.8)],
            ),
            ("uni".into(), vec![comp(1.0, dvector![0.0, 3.0], 1.0)]),
        ])
        .unwrap()
        .into()
    }

    fn fd_gradient(oracle: &ScoreOracle, x: &Vector, label: &PromptLabel, t: f64, sched: &NoiseSchedule) -> Vector {
        let h = 1e-5;
        Vector::from_fn(x.len(), |i, _| {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += h;
            lo[i] -= h;
            (oracle.log_density(&hi, label, t, sched).unwrap() - oracle.log_density(&lo, label, t, sched).unwrap())
                / (2.0 * h)
        })
    }

    #[test]
    fn standard_normal_score_at_time_zero() {
        let sched = NoiseSchedule::constant_ou(0.0, 1.0).unwrap();
        let s = std_normal().score(&dvector![1.0], &"a".into(), 0.0, &sched).unwrap();
        assert_eq!(s, dvector![-1.0]);
    }

    #[test]
    fn rectified_score_closed_form_matches_finite_difference() {
        let sched = NoiseSchedule::rectified_flow(0.99).unwrap();
        let (mu, sigma) = (dvector![0.8, -0.4], 0.6);
        let oracle = ScoreOracle::gaussian("c", mu.clone(), sigma).unwrap();
        let label = PromptLabel::from("c");
        for &t in &[0.0, 0.1, 0.5, 0.9, 0.99] {
            let x = dvector![0.3, 1.1];
            let expect = -(&x - &mu * (1.0 - t)) / ((1.0 - t).powi(2) * sigma * sigma + t * t);
            let s = oracle.score(&x, &label, t, &sched).unwrap();
            assert!((&s - &expect).amax() < 1e-12);
            assert!((s - fd_gradient(&oracle, &x, &label, t, &sched)).amax() < 1e-6);
        }
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_origin() {
        let comp = |m: f64| GaussianComponent {
            weight: 0.5,
            mean: dvector![m, -m],
            std: 0.9,
        };
        let oracle: ScoreOracle = ConditionalMixtureFamily::new([("s".into(), vec![comp(1.5), comp(-1.5)])])
            .unwrap()
            .into();
        let sched = NoiseSchedule::constant_ou(1.0, 1.0).unwrap();
        for &t in &[0.0, 0.3, 1.0] {
            let s = oracle.score(&dvector![0.0, 0.0], &"s".into(), t, &sched).unwrap();
            assert!(s.amax() < 1e-15);
        }
    }

    #[test]
    fn guidance_endpoints() {
        let oracle = two_labels();
        let sched = NoiseSchedule::constant_ou(1.0, 1.0).unwrap();
        let x = dvector![0.2, 0.4];
        let cond = oracle.score(&x, &"src".into(), 0.4, &sched).unwrap();
        let w1 = oracle.guided_score(&x, &Condition::plain("src"), 0.4, &sched).unwrap();
        assert_eq!(w1, cond);
        let w0 = oracle.guided_score(&x, &Condition::guided("src", 0.0), 0.4, &sched).unwrap();
        assert_eq!(w0, oracle.unconditional_score(&x, 0.4, &sched).unwrap());

        let single = std_normal();
        let s = single.score(&dvector![0.7], &"a".into(), 0.4, &sched).unwrap();
        let g = single.guided_score(&dvector![0.7], &Condition::guided("a", 2.5), 0.4, &sched).unwrap();
        assert_abs_diff_eq!(g[0], s[0], epsilon = 1e-14);
    }

    #[test]
    fn unknown_label_and_time_errors() {
        let oracle = std_normal();
        let sched = NoiseSchedule::rectified_flow(0.9).unwrap();
        assert!(matches!(
            oracle.score(&dvector![0.0], &"b".into(), 0.1, &sched),
            Err(Error::UnknownLabel(_))
        ));
        assert!(matches!(
            oracle.score(&dvector![0.0], &"a".into(), 0.95, &sched),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(
            oracle.score(&dvector![0.0, 1.0], &"a".into(), 0.1, &sched),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn family_validation() {
        assert!(ConditionalGaussianFamily::new([("a".into(), dvector![0.0], 0.0)]).is_err());
        assert!(ConditionalGaussianFamily::new([
            ("a".into(), dvector![0.0], 1.0),
            ("b".into(), dvector![0.0, 1.0], 1.0)
        ])
        .is_err());
        let comp = |w| GaussianComponent {
            weight: w,
            mean: dvector![0.0],
            std: 1.0,
        };
        assert!(ConditionalMixtureFamily::new([("a".into(), vec![comp(0.5), comp(0.4)])]).is_err());
        assert!(ConditionalMixtureFamily::new([("a".into(), vec![comp(1.0), comp(0.0)])]).is_err());
        assert!(ConditionalMixtureFamily::new([("a".into(), vec![])]).is_err());
    }

    #[test]
    fn dominant_component_reduces_to_gaussian() {
        let comp = |w, m| GaussianComponent {
            weight: w,
            mean: dvector![m],
            std: 0.8,
        };
        let mix: ScoreOracle = ConditionalMixtureFamily::new([("a".into(), vec![comp(1.0, 0.5)])]).unwrap().into();
        let gauss = ScoreOracle::gaussian("a", dvector![0.5], 0.8).unwrap();
        let sched = NoiseSchedule::constant_ou(0.7, 1.2).unwrap();
        for &x in &[-3.0, 0.0, 2.5] {
            let a = mix.score(&dvector![x], &"a".into(), 0.3, &sched).unwrap();
            let b = gauss.score(&dvector![x], &"a".into(), 0.3, &sched).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn marginal_samples_match_moments() {
        let oracle = mixture();
        let sched = NoiseSchedule::constant_ou(1.0, 1.0).unwrap();
        let label = PromptLabel::from("bi");
        let (mean, var) = oracle.marginal_moments(&label, 0.2, &sched).unwrap();
        let mut r = rng::seeded(9);
        let n = 50_000;
        let mut sum = Vector::zeros(2);
        for _ in 0..n {
            sum += oracle.sample_marginal(&label, 0.2, &sched, &mut r).unwrap();
        }
        let emp = sum / n as f64;
        for i in 0..2 {
            assert!((emp[i] - mean[i]).abs() < 4.0 * (var[i] / n as f64).sqrt());
        }
    }

    #[test]
    fn velocity_is_odd_and_matches_fd_rate() {
        let fam = ConditionalGaussianFamily::new([("c".into(), dvector![0.0], 1.0)]).unwrap();
        let label = PromptLabel::from("c");
        for &t in &[0.0, 0.3, 0.8] {
            assert_eq!(rf_velocity(&fam, &dvector![0.0], &label, t).unwrap()[0], 0.0);
        }
        // at t = 0, v(x) = (ṡ_0/s_0) x; compare against a difference quotient of s_t
        let s = |t: f64| ((1.0 - t).powi(2) + t * t).sqrt();
        let h = 1e-6;
        let fd_rate = (s(h) - s(0.0)) / h / s(0.0);
        let v = rf_velocity(&fam, &dvector![1.0], &label, 0.0).unwrap()[0];
        assert!((v - fd_rate).abs() < 1e-5);
        assert!(rf_velocity(&fam, &dvector![1.0], &label, 1.0).is_err());
    }

    #[test]
    fn velocity_matches_conditional_expectation() {
        // X_t = (1-t) X0 + t ε, velocity E[ε - X0 | X_t = x] by Gaussian conditioning.
        let (mu, sigma) = (1.3, 0.7);
        let fam = ConditionalGaussianFamily::new([("c".into(), dvector![mu], sigma)]).unwrap();
        for &t in &[0.1, 0.5, 0.9] {
            for &x in &[-1.0, 0.0, 2.0] {
                let u: f64 = 1.0 - t;
                let var_x = u * u * sigma * sigma + t * t;
                let cov_eps = t;
                let cov_x0 = u * sigma * sigma;
                let r = x - u * mu;
                let e_eps = cov_eps / var_x * r;
                let e_x0 = mu + cov_x0 / var_x * r;
                let v = rf_velocity(&fam, &dvector![x], &"c".into(), t).unwrap()[0];
                assert_abs_diff_eq!(v, e_eps - e_x0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_velocity_gives_zero_drift_at_origin() {
        let sched = NoiseSchedule::rectified_flow(0.99).unwrap();
        let d = rf_sde_drift(|x, _, _| Ok(x * 0.0), &dvector![0.0], &"c".into(), 0.5, &sched).unwrap();
        assert_eq!(d[0], 0.0);
        assert!(rf_sde_drift(|x, _, _| Ok(x.clone()), &dvector![0.0], &"c".into(), 0.0, &sched).is_err());
        let ou = NoiseSchedule::constant_ou(1.0, 1.0).unwrap();
        assert!(rf_sde_drift(|x, _, _| Ok(x.clone()), &dvector![0.0], &"c".into(), 0.5, &ou).is_err());
    }

    #[test]
    fn velocity_and_score_drifts_agree_pointwise() {
        let sched = NoiseSchedule::rectified_flow(0.999).unwrap();
        let fam = ConditionalGaussianFamily::new([("c".into(), dvector![1.5, -0.5], 0.4)]).unwrap();
        let oracle: ScoreOracle = fam.clone().into();
        let label = PromptLabel::from("c");
        let cond = Condition::plain("c");
        for i in 1..=20 {
            let t_rev = i as f64 / 20.0 * 0.98;
            let tau = 1.0 - t_rev;
            for x in [dvector![-2.0, 0.0], dvector![0.3, 0.9], dvector![4.0, -3.0]] {
                let v_form = rf_sde_drift(|x, l, t| rf_reverse_velocity(&fam, x, l, t), &x, &label, t_rev, &sched).unwrap();
                let g = sched.diffusion(tau).unwrap();
                let s = oracle.score(&x, &label, tau, &sched).unwrap();
                let s_form = &x * sched.alpha(tau).unwrap() + s * (g * g);
                assert!((&v_form - &s_form).amax() < 1e-8, "t_rev {t_rev}");
                let v_score = rf_sde_drift(|x, _, t| score_reverse_velocity(&oracle, x, &cond, t, &sched), &x, &label, t_rev, &sched)
                    .unwrap();
                assert!((v_score - s_form).amax() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn score_is_gradient_of_log_density(
            x0 in -4.0f64..4.0,
            x1 in -4.0f64..4.0,
            t in 0.0f64..1.0,
            pick in 0usize..4,
            sched_pick in 0usize..2,
        ) {
            let sched = if sched_pick == 0 {
                NoiseSchedule::constant_ou(0.8, 1.1).unwrap()
            } else {
                NoiseSchedule::rectified_flow(0.999).unwrap()
            };
            let t = t.min(sched.t_max());
            let (oracle, label) = match pick {
                0 => (two_labels(), "src"),
                1 => (two_labels(), "tar"),
                2 => (mixture(), "bi"),
                _ => (mixture(), "uni"),
            };
            let label = PromptLabel::from(label);
            let x = dvector![x0, x1];
            let s = oracle.score(&x, &label, t, &sched).unwrap();
            let fd = fd_gradient(&oracle, &x, &label, t, &sched);
            prop_assert!((s - fd).amax() <= 1e-5);
        }
    }
}
