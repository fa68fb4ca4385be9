//! Forward OU noise schedules and their deterministic kernels.
//!
//! A schedule fixes the drift rate `α(t)` and diffusion `g(t)` of
//! `dX = -α(t) X dt + g(t) dW`. Its solution is
//! `X_t = m(t) X_0 + ∫ Φ(t, s) g(s) dW_s` with
//!
//! - `m(t) = exp(-∫_0^t α)`,
//! - `Φ(t, s) = exp(-∫_s^t α) = m(t) / m(s)`,
//! - `V(t) = ∫_0^t Φ(t, s)² g(s)² ds` (variance of the noise integral).
//!
//! Closed forms are used when the kind admits them; the `quadrature_*`
//! methods compute the same kernels from `α` and `g` alone and serve as the
//! independent reference.

use serde::{Deserialize, Serialize};

use crate::quadrature::{self, KERNEL_TOLERANCE};
use crate::{Error, Result};

/// Tolerance for treating `t` as the terminal time 1.
const TERMINAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Constant `α` and `g`.
    ConstantOu { alpha: f64, g: f64 },
    /// `α(t) = 1/(1-t)`, `g(t) = sqrt(2t/(1-t))`: marginals of
    /// `(1-t) X_0 + t ε`.
    RectifiedFlow,
    /// `α` and `g` sampled on a grid, linearly interpolated.
    Tabulated(Tabulated),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    times: Vec<f64>,
    alpha: Vec<f64>,
    g: Vec<f64>,
    /// `∫_0^{times[i]} α`, exact for the piecewise-linear interpolant.
    cumulative: Vec<f64>,
}

impl Tabulated {
    fn new(times: Vec<f64>, alpha: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Schedule("tabulated schedule needs at least two samples".into()));
        }
        if alpha.len() != times.len() || g.len() != times.len() {
            return Err(Error::Schedule(format!(
                "tabulated samples disagree in length: {} times, {} alpha, {} g",
                times.len(),
                alpha.len(),
                g.len()
            )));
        }
        if times[0] != 0.0 {
            return Err(Error::Schedule("tabulated times must start at 0".into()));
        }
        if times.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Schedule("tabulated times must be strictly increasing".into()));
        }
        if *times.last().unwrap() > 1.0 {
            return Err(Error::Schedule("tabulated times must not exceed 1".into()));
        }
        if alpha.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::Schedule("tabulated samples must be finite".into()));
        }
        if g.iter().any(|&v| v < 0.0) {
            return Err(Error::Schedule("diffusion samples must be nonnegative".into()));
        }
        let mut cumulative = Vec::with_capacity(times.len());
        cumulative.push(0.0);
        for i in 1..times.len() {
            let piece = 0.5 * (alpha[i] + alpha[i - 1]) * (times[i] - times[i - 1]);
            cumulative.push(cumulative[i - 1] + piece);
        }
        Ok(Self {
            times,
            alpha,
            g,
            cumulative,
        })
    }

    fn segment(&self, t: f64) -> usize {
        match self.times.partition_point(|&x| x <= t) {
            0 => 0,
            i => (i - 1).min(self.times.len() - 2),
        }
    }

    fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        let i = self.segment(t);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        values[i] + w * (values[i + 1] - values[i])
    }

    fn integrated_alpha(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let dt = t - self.times[i];
        let a_t = self.interpolate(&self.alpha, t);
        self.cumulative[i] + 0.5 * (self.alpha[i] + a_t) * dt
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// A noise schedule `(α, g)` restricted to `[0, t_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_max: f64,
}

impl NoiseSchedule {
    pub fn constant_ou(alpha: f64, g: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Schedule(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if !(g.is_finite() && g >= 0.0) {
            return Err(Error::Schedule(format!("g must be finite and >= 0, got {g}")));
        }
        Ok(Self {
            kind: ScheduleKind::ConstantOu { alpha, g },
            t_max: 1.0,
        })
    }

    /// Rectified-flow schedule usable up to `t_max < 1`.
    pub fn rectified_flow(t_max: f64) -> Result<Self> {
        if !(t_max > 0.0 && t_max < 1.0) {
            return Err(Error::Schedule(format!(
                "rectified flow needs t_max in (0, 1), got {t_max}"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::RectifiedFlow,
            t_max,
        })
    }

    /// Rectified flow with `t_max = 1 - 1/(2N)` for an `N`-step grid.
    pub fn rectified_for_steps(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be positive".into()));
        }
        Self::rectified_flow(1.0 - 0.5 / steps as f64)
    }

    pub fn tabulated(times: Vec<f64>, alpha: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        let table = Tabulated::new(times, alpha, g)?;
        let t_max = *table.times.last().unwrap();
        Ok(Self {
            kind: ScheduleKind::Tabulated(table),
            t_max,
        })
    }

    /// Lowers the usable horizon.
    pub fn with_t_max(mut self, t_max: f64) -> Result<Self> {
        let limit = match &self.kind {
            ScheduleKind::Tabulated(table) => *table.times.last().unwrap(),
            ScheduleKind::RectifiedFlow => 1.0 - f64::EPSILON,
            ScheduleKind::ConstantOu { .. } => 1.0,
        };
        if !(t_max > 0.0 && t_max <= limit) {
            return Err(Error::Schedule(format!("t_max must lie in (0, {limit}], got {t_max}")));
        }
        self.t_max = t_max;
        Ok(self)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn is_rectified(&self) -> bool {
        matches!(self.kind, ScheduleKind::RectifiedFlow)
    }

    /// Errors unless `t` lies in `[0, t_max]`.
    pub fn check_time(&self, t: f64) -> Result<()> {
        self.check_coefficient_time(t)
    }

    fn check_coefficient_time(&self, t: f64) -> Result<()> {
        if t >= 0.0 && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Domain { t, t_max: self.t_max })
        }
    }

    // Kernels extend to t = 1 when the kind has finite limits there.
    fn check_kernel_time(&self, t: f64) -> Result<f64> {
        if t >= 0.0 && t <= self.t_max {
            return Ok(t);
        }
        let closed = !matches!(self.kind, ScheduleKind::Tabulated(_));
        if closed && (t - 1.0).abs() <= TERMINAL_EPS {
            return Ok(1.0);
        }
        Err(Error::Domain { t, t_max: self.t_max })
    }

    /// Drift rate `α(t)`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_coefficient_time(t)?;
        Ok(match &self.kind {
            ScheduleKind::ConstantOu { alpha, .. } => *alpha,
            ScheduleKind::RectifiedFlow => 1.0 / (1.0 - t),
            ScheduleKind::Tabulated(table) => table.interpolate(&table.alpha, t),
        })
    }

    /// Diffusion coefficient `g(t) >= 0`.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        self.check_coefficient_time(t)?;
        Ok(match &self.kind {
            ScheduleKind::ConstantOu { g, .. } => *g,
            ScheduleKind::RectifiedFlow => (2.0 * t / (1.0 - t)).sqrt(),
            ScheduleKind::Tabulated(table) => table.interpolate(&table.g, t).max(0.0),
        })
    }

    /// Mean decay `m(t) = exp(-∫_0^t α)`. Defined at `t = 1` through the
    /// exact limit for the closed-form kinds (`m(1) = 0` for rectified flow).
    pub fn decay_m(&self, t: f64) -> Result<f64> {
        let t = self.check_kernel_time(t)?;
        Ok(match &self.kind {
            ScheduleKind::ConstantOu { alpha, .. } => (-alpha * t).exp(),
            ScheduleKind::RectifiedFlow => 1.0 - t,
            ScheduleKind::Tabulated(table) => (-table.integrated_alpha(t)).exp(),
        })
    }

    /// Transition factor `Φ(t, s) = m(t) / m(s)` for `s <= t`.
    pub fn transition_phi(&self, t: f64, s: f64) -> Result<f64> {
        if s > t {
            return Err(Error::TimeOrder { t, s });
        }
        if s == t {
            self.check_kernel_time(t)?;
            return Ok(1.0);
        }
        Ok(self.decay_m(t)? / self.decay_m(s)?)
    }

    /// Variance `V(t)` of the noise integral; `V(1) = 1` for rectified flow.
    pub fn perturbation_variance(&self, t: f64) -> Result<f64> {
        let t = self.check_kernel_time(t)?;
        match &self.kind {
            ScheduleKind::ConstantOu { alpha, g } => {
                let g2 = g * g;
                if *alpha * t < 1e-8 {
                    // series of (1 - e^{-2αt}) / (2α)
                    Ok(g2 * t * (1.0 - alpha * t))
                } else {
                    Ok(g2 * (-(-2.0 * alpha * t).exp_m1()) / (2.0 * alpha))
                }
            }
            ScheduleKind::RectifiedFlow => Ok(t * t),
            ScheduleKind::Tabulated(table) => {
                let a_t = table.integrated_alpha(t);
                let integrand = |s: f64| {
                    let g = table.interpolate(&table.g, s);
                    g * g * (-2.0 * (a_t - table.integrated_alpha(s))).exp()
                };
                quadrature::integrate_with_breaks(integrand, 0.0, t, &table.times, KERNEL_TOLERANCE)
            }
        }
    }

    /// `∫_s^t α` by adaptive quadrature of `α` itself.
    pub fn quadrature_integrated_alpha(&self, t: f64, s: f64) -> Result<f64> {
        self.check_coefficient_time(t)?;
        self.check_coefficient_time(s)?;
        let breaks = self.breakpoints();
        quadrature::integrate_with_breaks(
            |u| self.alpha(u).unwrap_or(f64::NAN),
            s,
            t,
            &breaks,
            KERNEL_TOLERANCE,
        )
    }

    /// `m(t)` from quadrature of `α` (reference route).
    pub fn quadrature_decay_m(&self, t: f64) -> Result<f64> {
        Ok((-self.quadrature_integrated_alpha(t, 0.0)?).exp())
    }

    /// `V(t)` by nested quadrature of `Φ(t, s)² g(s)²` (reference route).
    pub fn quadrature_variance(&self, t: f64) -> Result<f64> {
        self.check_coefficient_time(t)?;
        let breaks = self.breakpoints();
        let failure = std::cell::Cell::new(None);
        let integrand = |s: f64| match self.quadrature_integrated_alpha(t, s) {
            Ok(a) => {
                let g = self.diffusion(s).unwrap_or(f64::NAN);
                g * g * (-2.0 * a).exp()
            }
            Err(e) => {
                failure.set(Some(e));
                f64::NAN
            }
        };
        let value = quadrature::integrate_with_breaks(integrand, 0.0, t, &breaks, KERNEL_TOLERANCE);
        if let Some(e) = failure.take() {
            return Err(e);
        }
        value
    }

    fn breakpoints(&self) -> Vec<f64> {
        match &self.kind {
            ScheduleKind::Tabulated(table) => table.times.clone(),
            _ => Vec::new(),
        }
    }
}
