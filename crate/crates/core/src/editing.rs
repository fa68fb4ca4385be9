//! Reverse-time integration and the editing algorithms.
//!
//! Reverse step `k` runs from reverse time `t_k` to `t_{k+1}`, which is
//! forward time `1 - t_k` down to `1 - t_{k+1}`. Editing starts at reverse
//! step `s`: the target state is set equal to the source state at `t_s` and
//! only steps `s..N` carry target dynamics.

use rand::Rng;
use serde::Serialize;

use crate::paths::{
    backward_increments, forward_closed_form, reverse_trajectory, sample_brownian, BrownianPath, Direction,
    GridKernels, TimeGrid, Trajectory,
};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::scores::{Condition, PromptLabel, ScoreOracle};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditConfig {
    pub grid: TimeGrid,
    pub start_step: usize,
    pub w_src: f64,
    pub w_tar: f64,
    pub seed: u64,
}

impl EditConfig {
    /// Uniform grid, unit guidance.
    pub fn new(steps: usize, start_step: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            grid: TimeGrid::uniform(steps)?,
            start_step,
            w_src: 1.0,
            w_tar: 1.0,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_guidance(mut self, w_src: f64, w_tar: f64) -> Self {
        self.w_src = w_src;
        self.w_tar = w_tar;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.steps();
        if n < 2 {
            return Err(Error::EditConfig(format!("need at least 2 steps, got {n}")));
        }
        if self.start_step >= n {
            return Err(Error::EditConfig(format!(
                "start step {} must be below the step count {n}",
                self.start_step
            )));
        }
        if !self.grid.is_symmetric() {
            return Err(Error::EditConfig("grid must be symmetric under t -> 1 - t".into()));
        }
        if !(self.w_src.is_finite() && self.w_tar.is_finite()) {
            return Err(Error::EditConfig("guidance weights must be finite".into()));
        }
        Ok(())
    }
}

/// Per reverse step `k < N`. Drift norms are absent before the start step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostic {
    pub t_rev: f64,
    pub source_drift_norm: Option<f64>,
    pub target_drift_norm: Option<f64>,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditResult {
    pub edited: Vector,
    pub source_reverse: Trajectory,
    pub target_reverse: Trajectory,
    /// Structured backward increments; absent for the resampling method,
    /// which has no single backward path.
    pub backward_path: Option<BrownianPath>,
    pub diagnostics: Vec<StepDiagnostic>,
}

/// `α(1 - t_rev) x + g²(1 - t_rev) S_w(x, c, 1 - t_rev)`.
pub fn reverse_drift(
    oracle: &ScoreOracle,
    x: &Vector,
    cond: &Condition,
    t_rev: f64,
    sched: &NoiseSchedule,
) -> Result<Vector> {
    let tau = 1.0 - t_rev;
    let alpha = sched.alpha(tau)?;
    let g = sched.diffusion(tau)?;
    let s = oracle.guided_score(x, cond, tau, sched)?;
    Ok(x * alpha + s * (g * g))
}

fn check_alignment(init: &Vector, increments: &BrownianPath, grid: &TimeGrid, start_step: usize) -> Result<()> {
    if increments.steps() != grid.steps() {
        return Err(Error::Length {
            expected: grid.steps(),
            got: increments.steps(),
        });
    }
    if init.len() != increments.dim() {
        return Err(Error::Dimension {
            expected: increments.dim(),
            got: init.len(),
        });
    }
    if start_step >= grid.steps() {
        return Err(Error::EditConfig(format!(
            "start step {start_step} must be below the step count {}",
            grid.steps()
        )));
    }
    Ok(())
}

/// Euler–Maruyama in reverse time with an arbitrary drift `b(x, t_rev)`:
/// `X_{k+1} = X_k + b(X_k, t_k) Δt_k + g(1 - t_k) ΔW̄_k` for `k >= start_step`.
/// Nodes up to `start_step` hold `init`.
pub fn integrate_reverse_with<F>(
    init: &Vector,
    increments: &BrownianPath,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    start_step: usize,
    drift: F,
) -> Result<Trajectory>
where
    F: Fn(&Vector, f64) -> Result<Vector>,
{
    check_alignment(init, increments, grid, start_step)?;
    let n = grid.steps();
    let mut states = vec![init.clone(); start_step + 1];
    for k in start_step..n {
        let t = grid.node(k);
        let g = sched.diffusion(1.0 - t)?;
        let x = &states[k];
        let b = drift(x, t)?;
        let mut next = x + b * grid.dt(k);
        next.axpy(g, increments.increment(k), 1.0);
        states.push(next);
    }
    Trajectory::new(states, Direction::Reversed)
}

/// Reverse SDE driven by the given increments under condition `cond`.
pub fn reverse_integrate(
    init: &Vector,
    increments: &BrownianPath,
    oracle: &ScoreOracle,
    cond: &Condition,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    start_step: usize,
) -> Result<Trajectory> {
    integrate_reverse_with(init, increments, grid, sched, start_step, |x, t| {
        reverse_drift(oracle, x, cond, t, sched)
    })
}

/// Samples `X_{t_s} ~ p_{1 - t_s}(· | c)` and integrates the reverse SDE with
/// fresh increments using `drift`. Returns the endpoint at reverse time 1.
pub fn fresh_reverse_sample<R, F>(
    oracle: &ScoreOracle,
    label: &PromptLabel,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    start_step: usize,
    rng: &mut R,
    drift: F,
) -> Result<Vector>
where
    R: Rng + ?Sized,
    F: Fn(&Vector, f64) -> Result<Vector>,
{
    let init = oracle.sample_marginal(label, 1.0 - grid.node(start_step), sched, rng)?;
    let path = sample_brownian(grid, oracle.dim(), rng)?;
    Ok(integrate_reverse_with(&init, &path, grid, sched, start_step, drift)?
        .last()
        .clone())
}

fn check_inputs(y0: &Vector, oracle: &ScoreOracle, labels: &[&PromptLabel]) -> Result<()> {
    if y0.len() != oracle.dim() {
        return Err(Error::Dimension {
            expected: oracle.dim(),
            got: y0.len(),
        });
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::EditConfig("initial point must be finite".into()));
    }
    for l in labels {
        oracle.components(l)?;
    }
    Ok(())
}

/// Shared-noise editing where the target increment at step `k` is
/// `noise(k, ΔW̄_k, Ȳ_k, Z̄_k)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn coupled_loop<N>(
    y0: &Vector,
    src: &PromptLabel,
    tar: &PromptLabel,
    oracle: &ScoreOracle,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
    mut noise: N,
) -> Result<EditResult>
where
    N: FnMut(usize, &Vector, &Vector, &Vector) -> Vector,
{
    cfg.validate()?;
    check_inputs(y0, oracle, &[src, tar])?;
    let grid = &cfg.grid;
    let n = grid.steps();
    let s = cfg.start_step;
    let cond_src = Condition::guided(src.clone(), cfg.w_src);
    let cond_tar = Condition::guided(tar.clone(), cfg.w_tar);

    let mut rng = rng::seeded(cfg.seed);
    let path = sample_brownian(grid, y0.len(), &mut rng)?;
    let source = reverse_trajectory(&forward_closed_form(y0, sched, grid, &path)?, grid)?;
    let backward = backward_increments(&path, &source, oracle, &cond_src, sched, grid, s)?;

    let mut target: Vec<Vector> = source.states()[..=s].to_vec();
    let mut diagnostics = Vec::with_capacity(n);
    for k in 0..n {
        let t = grid.node(k);
        let y = source.state(k);
        if k < s {
            diagnostics.push(StepDiagnostic {
                t_rev: t,
                source_drift_norm: None,
                target_drift_norm: None,
                gap: 0.0,
            });
            continue;
        }
        let z = &target[k];
        let g = sched.diffusion(1.0 - t)?;
        let b_y = reverse_drift(oracle, y, &cond_src, t, sched)?;
        let b_z = reverse_drift(oracle, z, &cond_tar, t, sched)?;
        let dw = noise(k, backward.increment(k), y, z);
        let mut next = z + &b_z * grid.dt(k);
        next.axpy(g, &dw, 1.0);
        diagnostics.push(StepDiagnostic {
            t_rev: t,
            source_drift_norm: Some(b_y.norm()),
            target_drift_norm: Some(b_z.norm()),
            gap: (z - y).norm(),
        });
        target.push(next);
    }
    let target = Trajectory::new(target, Direction::Reversed)?;
    Ok(EditResult {
        edited: target.last().clone(),
        source_reverse: source,
        target_reverse: target,
        backward_path: Some(backward),
        diagnostics,
    })
}

/// Synchronous-coupling editing: the source path is inverted into backward
/// increments, which then drive the target-conditioned reverse SDE from the
/// source state at the start step.
pub fn sync_edit(
    y0: &Vector,
    src: &PromptLabel,
    tar: &PromptLabel,
    oracle: &ScoreOracle,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
) -> Result<EditResult> {
    coupled_loop(y0, src, tar, oracle, sched, cfg, |_, dw, _, _| dw.clone())
}

/// Difference-process editing. Every step draws a fresh forward path from
/// `y0`, reads the source state `Ȳ_k = Y_{1 - t_k}` off it, and advances
/// `D ← D + [b_Z(Ȳ_k + D) - b_Y(Ȳ_k)] Δt_k`. Returns `y0 + D_N`.
pub fn resampling_ode_edit(
    y0: &Vector,
    src: &PromptLabel,
    tar: &PromptLabel,
    oracle: &ScoreOracle,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
) -> Result<EditResult> {
    cfg.validate()?;
    check_inputs(y0, oracle, &[src, tar])?;
    let grid = &cfg.grid;
    let n = grid.steps();
    let s = cfg.start_step;
    let cond_src = Condition::guided(src.clone(), cfg.w_src);
    let cond_tar = Condition::guided(tar.clone(), cfg.w_tar);
    let kernels = GridKernels::new(sched, grid)?;

    let mut rng = rng::seeded(cfg.seed);
    let mut d = Vector::zeros(y0.len());
    let mut source = Vec::with_capacity(n + 1);
    let mut target = Vec::with_capacity(n + 1);
    let mut diagnostics = Vec::with_capacity(n);
    for k in 0..n {
        let path = sample_brownian(grid, y0.len(), &mut rng)?;
        let y = kernels.closed_form_state(y0, &path, n - k);
        let z = &d + &y;
        let t = grid.node(k);
        let mut diag = StepDiagnostic {
            t_rev: t,
            source_drift_norm: None,
            target_drift_norm: None,
            gap: d.norm(),
        };
        if k >= s {
            let b_y = reverse_drift(oracle, &y, &cond_src, t, sched)?;
            let b_z = reverse_drift(oracle, &z, &cond_tar, t, sched)?;
            diag.source_drift_norm = Some(b_y.norm());
            diag.target_drift_norm = Some(b_z.norm());
            d += (b_z - b_y) * grid.dt(k);
        }
        diagnostics.push(diag);
        source.push(y);
        target.push(z);
    }
    let edited = &d + y0;
    source.push(y0.clone());
    target.push(edited.clone());
    Ok(EditResult {
        edited,
        source_reverse: Trajectory::new(source, Direction::Reversed)?,
        target_reverse: Trajectory::new(target, Direction::Reversed)?,
        backward_path: None,
        diagnostics,
    })
}

/// Noise-and-denoise baseline: draws `Y_{1 - t_s}` from the forward
/// transition of `y0`, then runs the target-conditioned reverse SDE from
/// `t_s` with fresh increments. `start_step = N` returns `y0`.
pub fn independent_edit(
    y0: &Vector,
    tar: &PromptLabel,
    oracle: &ScoreOracle,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
) -> Result<Vector> {
    check_inputs(y0, oracle, &[tar])?;
    let grid = &cfg.grid;
    let n = grid.steps();
    if cfg.start_step > n {
        return Err(Error::EditConfig(format!(
            "start step {} exceeds the step count {n}",
            cfg.start_step
        )));
    }
    if cfg.start_step == n {
        return Ok(y0.clone());
    }
    let cond = Condition::guided(tar.clone(), cfg.w_tar);
    let mut rng = rng::seeded(cfg.seed);
    let tau = 1.0 - grid.node(cfg.start_step);
    let (m, v) = (sched.decay_m(tau)?, sched.perturbation_variance(tau)?);
    let init = y0 * m + rng::standard_normal_vector(y0.len(), &mut rng) * v.sqrt();
    let path = sample_brownian(grid, y0.len(), &mut rng)?;
    Ok(reverse_integrate(&init, &path, oracle, &cond, grid, sched, cfg.start_step)?
        .last()
        .clone())
}
