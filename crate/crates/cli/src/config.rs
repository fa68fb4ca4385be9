use std::collections::BTreeMap;

use anyhow::{bail, ensure, Context, Result};
use serde::Deserialize;
use syncsde::coupling::CouplingRule;
use syncsde::editing::EditConfig;
use syncsde::paths::TimeGrid;
use syncsde::schedule::NoiseSchedule;
use syncsde::scores::{ConditionalGaussianFamily, ConditionalMixtureFamily, GaussianComponent, PromptLabel, ScoreOracle};
use syncsde::{Matrix, Vector};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub grid: GridSpec,
    pub oracle: BTreeMap<String, FamilySpec>,
    #[serde(default)]
    pub edit: EditSpec,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub reversal: ReversalSpec,
    #[serde(default)]
    pub marginal: MarginalSpec,
    #[serde(default)]
    pub coupling: CouplingSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Named(String),
    Table(ScheduleTable),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleTable {
    ConstantOu { alpha: f64, g: f64 },
    Rectified { t_max: Option<f64> },
    Tabulated { times: Vec<f64>, alpha: Vec<f64>, g: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub nodes: Option<Vec<f64>>,
}

fn default_steps() -> usize {
    28
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            nodes: None,
        }
    }
}

/// Either `mean`/`std` (one Gaussian) or `weights`/`means`/`stds` (mixture).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub mean: Option<Vec<f64>>,
    pub std: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub means: Option<Vec<Vec<f64>>>,
    pub stds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    pub fn items(&self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    #[serde(default = "default_methods")]
    pub method: OneOrMany,
    #[serde(default = "default_src")]
    pub src: String,
    #[serde(default = "default_tar")]
    pub tar: String,
    #[serde(default = "default_start")]
    pub start_step: usize,
    #[serde(default = "one")]
    pub w_src: f64,
    #[serde(default = "one")]
    pub w_tar: f64,
    pub y0: Option<Vec<f64>>,
    /// Largest `‖edited - y0‖` accepted from sync editing with identical prompts.
    #[serde(default = "default_identity_tol")]
    pub identity_tolerance: f64,
}

fn default_methods() -> OneOrMany {
    OneOrMany::Many(vec!["sync".into(), "resampling".into(), "independent".into()])
}
fn default_src() -> String {
    "src".into()
}
fn default_tar() -> String {
    "tar".into()
}
fn default_start() -> usize {
    4
}
fn one() -> f64 {
    1.0
}
fn default_identity_tol() -> f64 {
    0.5
}

impl Default for EditSpec {
    fn default() -> Self {
        Self {
            method: default_methods(),
            src: default_src(),
            tar: default_tar(),
            start_step: default_start(),
            w_src: 1.0,
            w_tar: 1.0,
            y0: None,
            identity_tolerance: default_identity_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    #[serde(default)]
    pub base: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    100
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            base: 0,
            replicates: default_replicates(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReversalSpec {
    #[serde(default = "default_reversal_steps")]
    pub steps: Vec<usize>,
    pub label: Option<String>,
    #[serde(default = "one")]
    pub guidance: f64,
    pub start_step: Option<usize>,
    pub start_time: Option<f64>,
    #[serde(default = "default_min_order")]
    pub min_order: f64,
}

fn default_reversal_steps() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_min_order() -> f64 {
    0.8
}

impl Default for ReversalSpec {
    fn default() -> Self {
        Self {
            steps: default_reversal_steps(),
            label: None,
            guidance: 1.0,
            start_step: None,
            start_time: None,
            min_order: default_min_order(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    pub label: Option<String>,
    #[serde(default = "default_form")]
    pub form: String,
    pub start_step: Option<usize>,
    #[serde(default = "one")]
    pub guidance: f64,
    #[serde(default = "default_alpha")]
    pub ks_alpha: f64,
}

fn default_form() -> String {
    "score".into()
}
fn default_alpha() -> f64 {
    0.01
}

impl Default for MarginalSpec {
    fn default() -> Self {
        Self {
            label: None,
            form: default_form(),
            start_step: None,
            guidance: 1.0,
            ks_alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    #[serde(default = "default_rules")]
    pub rules: Vec<String>,
    #[serde(default = "default_random_rules")]
    pub random_rules: usize,
    #[serde(default)]
    pub fixed: Vec<Vec<Vec<f64>>>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_trace_matrices")]
    pub trace_matrices: usize,
    #[serde(default = "default_trace_dims")]
    pub trace_dims: Vec<usize>,
    #[serde(default = "default_trace_draws")]
    pub trace_draws: usize,
    #[serde(default = "default_trace_dt")]
    pub trace_dt: f64,
}

fn default_rules() -> Vec<String> {
    vec!["synchronous".into(), "reflection".into()]
}
fn default_random_rules() -> usize {
    10
}
fn default_trace_matrices() -> usize {
    50
}
fn default_trace_dims() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn default_trace_draws() -> usize {
    100_000
}
fn default_trace_dt() -> f64 {
    1.0 / 64.0
}

impl Default for CouplingSpec {
    fn default() -> Self {
        Self {
            rules: default_rules(),
            random_rules: default_random_rules(),
            fixed: Vec::new(),
            alpha: default_alpha(),
            trace_matrices: default_trace_matrices(),
            trace_dims: default_trace_dims(),
            trace_draws: default_trace_draws(),
            trace_dt: default_trace_dt(),
        }
    }
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).context("malformed config")?;
    ensure!(cfg.seeds.replicates >= 1, "seeds.replicates must be at least 1");
    ensure!(!cfg.oracle.is_empty(), "config declares no oracle labels");
    Ok(cfg)
}

/// The oracle, plus the Gaussian family when every label is a single Gaussian.
pub struct BuiltOracle {
    pub oracle: ScoreOracle,
    pub gaussian: Option<ConditionalGaussianFamily>,
}

impl RunConfig {
    /// Schedule for an `n`-step grid; an unset rectified horizon becomes
    /// `1 - 1/(2n)`.
    pub fn schedule(&self, steps: usize) -> Result<NoiseSchedule> {
        let sched = match &self.schedule {
            ScheduleSpec::Named(name) => match name.as_str() {
                "rectified" | "rectified_flow" => NoiseSchedule::rectified_for_steps(steps)?,
                other => bail!("unknown schedule `{other}`; use \"rectified\" or a table with `kind`"),
            },
            ScheduleSpec::Table(ScheduleTable::ConstantOu { alpha, g }) => NoiseSchedule::constant_ou(*alpha, *g)?,
            ScheduleSpec::Table(ScheduleTable::Rectified { t_max }) => match t_max {
                Some(t) => NoiseSchedule::rectified_flow(*t)?,
                None => NoiseSchedule::rectified_for_steps(steps)?,
            },
            ScheduleSpec::Table(ScheduleTable::Tabulated { times, alpha, g }) => {
                NoiseSchedule::tabulated(times.clone(), alpha.clone(), g.clone())?
            }
        };
        Ok(sched)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        Ok(match &self.grid.nodes {
            Some(nodes) => TimeGrid::from_nodes(nodes.clone())?,
            None => TimeGrid::uniform(self.grid.steps)?,
        })
    }

    pub fn oracle(&self) -> Result<BuiltOracle> {
        let mut gaussians = Vec::new();
        let mut mixtures = Vec::new();
        for (label, spec) in &self.oracle {
            let comps = spec.components(label)?;
            if let [c] = comps.as_slice() {
                gaussians.push((PromptLabel::new(label.as_str()), c.mean.clone(), c.std));
            }
            mixtures.push((PromptLabel::new(label.as_str()), comps));
        }
        if gaussians.len() == mixtures.len() {
            let family = ConditionalGaussianFamily::new(gaussians)?;
            Ok(BuiltOracle {
                oracle: family.clone().into(),
                gaussian: Some(family),
            })
        } else {
            Ok(BuiltOracle {
                oracle: ConditionalMixtureFamily::new(mixtures)?.into(),
                gaussian: None,
            })
        }
    }

    pub fn label(&self, name: &str, oracle: &ScoreOracle) -> Result<PromptLabel> {
        let label = PromptLabel::new(name);
        oracle
            .components(&label)
            .with_context(|| format!("label `{name}` is not declared under [oracle]"))?;
        Ok(label)
    }

    pub fn first_label(&self) -> String {
        self.oracle.keys().next().cloned().unwrap_or_default()
    }

    pub fn edit_config(&self, grid: TimeGrid) -> Result<EditConfig> {
        let cfg = EditConfig {
            grid,
            start_step: self.edit.start_step,
            w_src: self.edit.w_src,
            w_tar: self.edit.w_tar,
            seed: self.seeds.base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn y0(&self, dim: usize) -> Result<Option<Vector>> {
        match &self.edit.y0 {
            None => Ok(None),
            Some(v) => {
                ensure!(v.len() == dim, "edit.y0 has {} entries, the oracle dimension is {dim}", v.len());
                ensure!(v.iter().all(|x| x.is_finite()), "edit.y0 must be finite");
                Ok(Some(Vector::from_vec(v.clone())))
            }
        }
    }

    pub fn coupling_rules(&self, dim: usize) -> Result<Vec<CouplingRule>> {
        let mut rules = Vec::new();
        for name in &self.coupling.rules {
            rules.push(match name.as_str() {
                "synchronous" | "sync" => CouplingRule::Synchronous,
                "reflection" => CouplingRule::Reflection,
                other => bail!("unknown coupling rule `{other}`"),
            });
        }
        for i in 0..self.coupling.random_rules {
            rules.push(CouplingRule::RandomOrthonormal {
                seed: syncsde::rng::replicate_seed(self.seeds.base ^ 0x5eed, i as u64),
            });
        }
        for (i, rows) in self.coupling.fixed.iter().enumerate() {
            ensure!(
                rows.len() == dim && rows.iter().all(|r| r.len() == dim),
                "coupling.fixed[{i}] must be a {dim}x{dim} matrix"
            );
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let rule = CouplingRule::FixedOrthonormal(Matrix::from_row_slice(dim, dim, &flat));
            rule.prepare(dim).with_context(|| format!("coupling.fixed[{i}]"))?;
            rules.push(rule);
        }
        ensure!(
            rules.contains(&CouplingRule::Synchronous),
            "coupling.rules must include \"synchronous\""
        );
        Ok(rules)
    }
}

impl FamilySpec {
    fn components(&self, label: &str) -> Result<Vec<GaussianComponent>> {
        match (self, &self.mean, self.std) {
            (
                FamilySpec {
                    weights: None,
                    means: None,
                    stds: None,
                    ..
                },
                Some(mean),
                Some(std),
            ) => Ok(vec![GaussianComponent {
                weight: 1.0,
                mean: Vector::from_vec(mean.clone()),
                std,
            }]),
            (
                FamilySpec {
                    weights: Some(w),
                    means: Some(m),
                    stds: Some(s),
                    ..
                },
                None,
                None,
            ) => {
                ensure!(
                    w.len() == m.len() && m.len() == s.len(),
                    "oracle.{label}: weights, means and stds differ in length"
                );
                Ok(w.iter()
                    .zip(m)
                    .zip(s)
                    .map(|((&weight, mean), &std)| GaussianComponent {
                        weight,
                        mean: Vector::from_vec(mean.clone()),
                        std,
                    })
                    .collect())
            }
            _ => bail!("oracle.{label}: give either `mean` and `std`, or `weights`, `means` and `stds`"),
        }
    }
}
