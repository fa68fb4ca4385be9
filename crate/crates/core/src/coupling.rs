//! Orthonormal couplings of the target noise to the source noise.
//!
//! A rule maps the source increment `ΔW` to the target increment `Q ΔW`
//! with `Q` orthonormal, so the target is still driven by a Brownian motion.
//! The one-step squared deviation of the coupled pair grows by
//! `g² E‖(Q - I) ΔW‖² = 2 g² tr(I - Q) Δt`, which is smallest for `Q = I`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::editing::{coupled_loop, reverse_drift, EditConfig, EditResult};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::scores::{Condition, PromptLabel, ScoreOracle};
use crate::verify::{paired_comparison, PairedComparison};
use crate::{Error, Matrix, Result, Vector};

/// Maximum entry of `QᵀQ - I` accepted as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Below this separation the reflection direction is undefined and the
/// reflection rule falls back to `Q = I`.
pub const REFLECTION_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CouplingRule {
    Synchronous,
    Reflection,
    FixedOrthonormal(Matrix),
    /// A fixed Haar-like orthonormal matrix drawn from `seed`.
    RandomOrthonormal { seed: u64 },
}

impl CouplingRule {
    pub fn name(&self) -> String {
        match self {
            CouplingRule::Synchronous => "synchronous".into(),
            CouplingRule::Reflection => "reflection".into(),
            CouplingRule::FixedOrthonormal(_) => "fixed".into(),
            CouplingRule::RandomOrthonormal { seed } => format!("random-{seed}"),
        }
    }

    /// Validates the rule for dimension `d` and materializes random matrices.
    pub fn prepare(&self, d: usize) -> Result<CouplingRule> {
        match self {
            CouplingRule::FixedOrthonormal(q) => {
                if q.nrows() != d || q.ncols() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        got: q.nrows().max(q.ncols()),
                    });
                }
                check_orthonormal(q)?;
                Ok(self.clone())
            }
            CouplingRule::RandomOrthonormal { seed } => Ok(CouplingRule::FixedOrthonormal(random_orthonormal(d, *seed))),
            _ => Ok(self.clone()),
        }
    }

    /// `Q` for the states `(y, z)`.
    pub fn matrix(&self, y: &Vector, z: &Vector) -> Result<Matrix> {
        let d = y.len();
        Ok(match self.prepare(d)? {
            CouplingRule::FixedOrthonormal(q) => q,
            CouplingRule::Reflection => match reflection_normal(y, z) {
                Some(n) => Matrix::identity(d, d) - &n * n.transpose() * 2.0,
                None => Matrix::identity(d, d),
            },
            _ => Matrix::identity(d, d),
        })
    }
}

fn reflection_normal(y: &Vector, z: &Vector) -> Option<Vector> {
    let diff = y - z;
    let norm = diff.norm();
    (norm >= REFLECTION_TIE).then(|| diff / norm)
}

fn orthonormality_defect(q: &Matrix) -> f64 {
    if q.nrows() != q.ncols() {
        return f64::INFINITY;
    }
    (q.transpose() * q - Matrix::identity(q.nrows(), q.ncols())).amax()
}

pub fn check_orthonormal(q: &Matrix) -> Result<()> {
    let defect = orthonormality_defect(q);
    if defect.is_nan() || defect > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal(defect));
    }
    Ok(())
}

/// `Q ΔW` with `Q` chosen by `rule` at states `(y, z)`.
pub fn apply_rule(rule: &CouplingRule, dw: &Vector, y: &Vector, z: &Vector) -> Result<Vector> {
    let d = dw.len();
    if y.len() != d || z.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if y.len() != d { y.len() } else { z.len() },
        });
    }
    Ok(match rule {
        CouplingRule::Synchronous => dw.clone(),
        CouplingRule::Reflection => match reflection_normal(y, z) {
            // (I - 2 n nᵀ) ΔW
            Some(n) => dw - &n * (2.0 * n.dot(dw)),
            None => dw.clone(),
        },
        other => match other.prepare(d)? {
            CouplingRule::FixedOrthonormal(q) => q * dw,
            _ => unreachable!("prepare materializes matrix rules"),
        },
    })
}

/// Orthonormal factor of a Gaussian matrix, with columns signed so that the
/// triangular factor has a positive diagonal.
pub fn random_orthonormal(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `2 tr(I - Q) Δt`.
pub fn expected_increment_cost(q: &Matrix, dt: f64) -> Result<f64> {
    check_orthonormal(q)?;
    Ok(2.0 * (q.nrows() as f64 - q.trace()) * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

const MC_CHUNKS: u64 = 64;

/// `(1/n) Σ ‖(Q - I) ΔW_i‖²` with `ΔW_i ~ N(0, Δt I)`, plus its standard
/// error. Work is split into fixed chunks on independent streams, so the
/// result does not depend on the thread count.
pub fn mc_increment_cost(q: &Matrix, dt: f64, n: usize, seed: u64) -> Result<McEstimate> {
    if n == 0 {
        return Err(Error::TooFewSamples { min: 1, got: 0 });
    }
    if q.nrows() != q.ncols() {
        return Err(Error::Dimension {
            expected: q.nrows(),
            got: q.ncols(),
        });
    }
    let d = q.nrows();
    let a = q - Matrix::identity(d, d);
    let scale = dt.sqrt();
    let per = n as u64 / MC_CHUNKS;
    let extra = n as u64 % MC_CHUNKS;
    let partial: Vec<(f64, f64)> = (0..MC_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let count = per + u64::from(c < extra);
            let mut r = rng::stream(seed, c);
            let mut x = vec![0.0; d];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                for v in x.iter_mut() {
                    *v = scale * Distribution::<f64>::sample(&StandardNormal, &mut r);
                }
                let mut sq = 0.0;
                for i in 0..d {
                    let mut row = 0.0;
                    for (j, xj) in x.iter().enumerate() {
                        row += a[(i, j)] * xj;
                    }
                    sq += row * row;
                }
                s1 += sq;
                s2 += sq * sq;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = partial.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let nf = n as f64;
    let mean = s1 / nf;
    let se = if n > 1 {
        ((s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0) / nf).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, se, n })
}

/// Shared-noise editing with the target increment `Q ΔW̄_k` at step `k`.
/// The synchronous rule reproduces [`crate::editing::sync_edit`] exactly.
#[allow(clippy::too_many_arguments)]
pub fn coupled_edit(
    y0: &Vector,
    src: &PromptLabel,
    tar: &PromptLabel,
    rule: &CouplingRule,
    oracle: &ScoreOracle,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
) -> Result<EditResult> {
    let rule = rule.prepare(y0.len())?;
    let mut failure = None;
    let res = coupled_loop(y0, src, tar, oracle, sched, cfg, |_, dw, y, z| {
        apply_rule(&rule, dw, y, z).unwrap_or_else(|e| {
            failure = Some(e);
            dw.clone()
        })
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(res),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleOutcome {
    pub rule: String,
    /// Mean one-step squared deviation at the matched states.
    pub one_step_mean: f64,
    pub one_step_se: f64,
    /// Paired comparison of this rule minus synchronous; absent for the
    /// synchronous rule itself.
    pub versus_sync: Option<PairedComparison>,
    /// Average of `2 g² tr(I - Q) Δt` over the matched states.
    pub predicted_gap: f64,
    /// Mean of `‖Z̄_N - Ȳ_N‖²` over full coupled edits.
    pub end_to_end_mean: f64,
    pub end_to_end_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyReport {
    pub t_rev: f64,
    pub dt: f64,
    pub seeds: usize,
    pub outcomes: Vec<RuleOutcome>,
    pub argmin: String,
}

impl GreedyReport {
    pub fn sync_is_argmin(&self) -> bool {
        self.argmin == CouplingRule::Synchronous.name()
    }

    /// Synchronous is the argmin and every paired comparison rejects
    /// equality at level `alpha`.
    pub fn passes(&self, alpha: f64) -> bool {
        self.sync_is_argmin()
            && self
                .outcomes
                .iter()
                .filter_map(|o| o.versus_sync.as_ref())
                .all(|c| c.p_value < alpha)
    }
}

/// Compares coupling rules at matched states.
///
/// For each seed a source state `Ȳ ~ p_τ(· | src)` and a target state
/// `Z̄ ~ p_τ(· | tar)` are drawn at forward time `τ = 1 - t_s`, together with
/// one increment `ΔW`. Every rule takes one reverse step from the same
/// `(Ȳ, Z̄, ΔW)`, evaluated antithetically at `±ΔW`, and the squared
/// separation is averaged over the pair. The drift part of the deviation is
/// then identical across rules and differences isolate the trace term.
/// Each seed also runs a full coupled edit per rule from `y0 ~ p(· | src)`.
#[allow(clippy::too_many_arguments)]
pub fn greedy_optimality_experiment(
    oracle: &ScoreOracle,
    src: &PromptLabel,
    tar: &PromptLabel,
    sched: &NoiseSchedule,
    cfg: &EditConfig,
    rules: &[CouplingRule],
    seeds: usize,
) -> Result<GreedyReport> {
    cfg.validate()?;
    if seeds < 2 {
        return Err(Error::TooFewSamples { min: 2, got: seeds });
    }
    let sync_index = rules
        .iter()
        .position(|r| *r == CouplingRule::Synchronous)
        .ok_or_else(|| Error::Invalid("rules must include the synchronous rule".into()))?;
    let d = oracle.dim();
    let prepared = rules.iter().map(|r| r.prepare(d)).collect::<Result<Vec<_>>>()?;
    let k = cfg.start_step;
    let t = cfg.grid.node(k);
    let dt = cfg.grid.dt(k);
    let tau = 1.0 - t;
    let g = sched.diffusion(tau)?;
    let cond_src = Condition::guided(src.clone(), cfg.w_src);
    let cond_tar = Condition::guided(tar.clone(), cfg.w_tar);

    // per seed, per rule: (one-step deviation, predicted gap, end-to-end deviation)
    let per_seed: Vec<Vec<(f64, f64, f64)>> = (0..seeds as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<(f64, f64, f64)>> {
            let mut r = rng::stream(cfg.seed, i);
            let y = oracle.sample_marginal(src, tau, sched, &mut r)?;
            let z = oracle.sample_marginal(tar, tau, sched, &mut r)?;
            let dw = rng::standard_normal_vector(d, &mut r) * dt.sqrt();
            let y0 = oracle.sample(src, &mut r)?;
            let edit_cfg = cfg.clone().with_seed(rng::replicate_seed(cfg.seed, i));
            let drift_gap = (&z - &y) + (reverse_drift(oracle, &z, &cond_tar, t, sched)?
                - reverse_drift(oracle, &y, &cond_src, t, sched)?)
                * dt;
            prepared
                .iter()
                .map(|rule| {
                    let plus = apply_rule(rule, &dw, &y, &z)?;
                    let minus = apply_rule(rule, &(-&dw), &y, &z)?;
                    let dev = 0.5
                        * ((&drift_gap + (&plus - &dw) * g).norm_squared()
                            + (&drift_gap + (&minus + &dw) * g).norm_squared());
                    let q = rule.matrix(&y, &z)?;
                    let predicted = 2.0 * g * g * (d as f64 - q.trace()) * dt;
                    let e = coupled_edit(&y0, src, tar, rule, oracle, sched, &edit_cfg)?;
                    let end = (e.edited - e.source_reverse.last()).norm_squared();
                    Ok((dev, predicted, end))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let column = |j: usize, f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> { per_seed.iter().map(|row| f(&row[j])).collect() };
    let sync_dev = column(sync_index, |v| v.0);
    let mut outcomes = Vec::with_capacity(rules.len());
    for (j, rule) in rules.iter().enumerate() {
        let dev = column(j, |v| v.0);
        let (m, se) = mean_se(&dev);
        let (end_m, end_se) = mean_se(&column(j, |v| v.2));
        let versus_sync = (j != sync_index).then(|| paired_comparison(&dev, &sync_dev)).transpose()?;
        outcomes.push(RuleOutcome {
            rule: rule.name(),
            one_step_mean: m,
            one_step_se: se,
            versus_sync,
            predicted_gap: mean_se(&column(j, |v| v.1)).0,
            end_to_end_mean: end_m,
            end_to_end_se: end_se,
        });
    }
    let argmin = outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.one_step_mean
                .total_cmp(&b.1.one_step_mean)
                .then_with(|| (a.0 != sync_index).cmp(&(b.0 != sync_index)))
        })
        .map(|(_, o)| o.rule.clone())
        .expect("rules are non-empty");
    Ok(GreedyReport {
        t_rev: t,
        dt,
        seeds,
        outcomes,
        argmin,
    })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
