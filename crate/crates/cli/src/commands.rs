use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use syncsde::coupling::{
    expected_increment_cost, greedy_optimality_experiment, mc_increment_cost, random_orthonormal, CouplingRule,
    GreedyReport,
};
use syncsde::editing::{
    fresh_reverse_sample, independent_edit, resampling_ode_edit, reverse_drift, sync_edit, EditConfig, EditResult,
};
use syncsde::paths::TimeGrid;
use syncsde::rng;
use syncsde::schedule::NoiseSchedule;
use syncsde::scores::{rf_reverse_velocity, rf_sde_drift, Condition, PromptLabel};
use syncsde::verify::{
    convergence_study, ks_two_sample, marginal_check, paired_comparison, KsResult, MarginalReport, ReversalSetup,
    StartAt, MIN_MARGINAL_SAMPLES,
};
use syncsde::Vector;

use crate::config::RunConfig;
use crate::svg::{self, Scale, Series};

/// Files are buffered and only written once a command has finished, so a
/// failed run never leaves partial output behind.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn text(&mut self, name: &str, body: String) {
        self.files.push((name.to_string(), body.into_bytes()));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        self.files.push((name.to_string(), body));
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        self.files.push((name.to_string(), w.into_inner()?));
        Ok(())
    }

    fn raw(&mut self, name: &str, body: Vec<u8>) {
        self.files.push((name.to_string(), body));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, body) in &self.files {
            let path = dir.join(name);
            fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

pub struct Outcome {
    pub pass: bool,
    pub message: String,
    pub outputs: Outputs,
}

fn num(v: f64) -> String {
    v.to_string()
}

fn coords(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

/// Errors unless the reverse dynamics are defined from reverse step `start`.
fn check_start(sched: &NoiseSchedule, grid: &TimeGrid, start: usize) -> Result<()> {
    ensure!(start < grid.steps(), "start step {start} must be below the step count {}", grid.steps());
    let tau = 1.0 - grid.node(start);
    sched
        .diffusion(tau)
        .with_context(|| format!("start step {start} reaches forward time {tau}, outside the schedule"))?;
    Ok(())
}

/// Reverse time at which rectified-flow retrace studies begin by default.
const RECTIFIED_REVERSAL_START: f64 = 0.125;

fn default_start(sched: &NoiseSchedule) -> usize {
    usize::from(sched.is_rectified())
}

pub fn reversal_check(cfg: &RunConfig) -> Result<Outcome> {
    let spec = &cfg.reversal;
    ensure!(!spec.steps.is_empty(), "reversal.steps is empty");
    ensure!(
        spec.steps.windows(2).all(|w| w[0] < w[1]),
        "reversal.steps must be strictly increasing"
    );
    let built = cfg.oracle()?;
    let label_name = spec.label.clone().unwrap_or_else(|| cfg.first_label());
    let label = cfg.label(&label_name, &built.oracle)?;
    let sched = cfg.schedule(*spec.steps.last().unwrap())?;
    let start = match (spec.start_step, spec.start_time) {
        (Some(_), Some(_)) => bail!("set at most one of reversal.start_step and reversal.start_time"),
        (Some(k), None) => StartAt::Step(k),
        (None, Some(t)) => StartAt::Time(t),
        (None, None) if sched.is_rectified() => StartAt::Time(RECTIFIED_REVERSAL_START),
        (None, None) => StartAt::Step(0),
    };
    for &n in &spec.steps {
        check_start(&sched, &TimeGrid::uniform(n)?, start.step(n)?)?;
    }
    let setup = ReversalSetup {
        oracle: built.oracle,
        cond: Condition::guided(label, spec.guidance),
        sched,
        y0: None,
        start,
        base_seed: cfg.seeds.base,
    };
    let table = convergence_study(&setup, &spec.steps, cfg.seeds.replicates)?;
    let pass = table.slope.is_none_or(|s| s >= spec.min_order);

    let mut out = Outputs::default();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| vec![r.steps.to_string(), num(r.median_error), num(r.mean_error)])
        .collect();
    out.csv(
        "convergence.csv",
        &["steps".into(), "median_error".into(), "mean_error".into()],
        &rows,
    )?;
    out.json(
        "summary.json",
        &json!({
            "command": "reversal-check",
            "label": label_name,
            "replicates": cfg.seeds.replicates,
            "base_seed": cfg.seeds.base,
            "start_step": start,
            "rows": table.rows,
            "slope": table.slope,
            "monotone": table.is_monotone(),
            "min_order": spec.min_order,
            "pass": pass,
        }),
    )?;
    out.text(
        "convergence.svg",
        svg::line_plot(
            "median pathwise retrace error",
            "steps N",
            "sup-norm error",
            &[Series {
                name: "median".into(),
                points: table.rows.iter().map(|r| (r.steps as f64, r.median_error)).collect(),
            }],
            Scale::Log,
            Scale::Log,
        ),
    );
    let message = match table.slope {
        Some(s) => format!("fitted order {s:.3} (required >= {})", spec.min_order),
        None => "single step count; order not fitted".to_string(),
    };
    Ok(Outcome {
        pass,
        message,
        outputs: out,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Method {
    Sync,
    Resampling,
    Independent,
}

impl Method {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sync" => Method::Sync,
            "resampling" => Method::Resampling,
            "independent" => Method::Independent,
            other => bail!("unknown edit method `{other}` (use sync, resampling or independent)"),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Method::Sync => "sync",
            Method::Resampling => "resampling",
            Method::Independent => "independent",
        }
    }
}

#[derive(Serialize)]
struct ReplicateRecord<'a> {
    replicate: usize,
    seed: u64,
    y0: &'a Vector,
    edited: &'a Vector,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<&'a EditResult>,
}

struct Replicate {
    seed: u64,
    y0: Vector,
    results: Vec<(Vector, Option<EditResult>)>,
}

pub fn edit(cfg: &RunConfig) -> Result<Outcome> {
    let mut methods = Vec::new();
    for m in cfg.edit.method.items() {
        let m = Method::parse(&m)?;
        ensure!(!methods.contains(&m), "edit method `{}` listed twice", m.name());
        methods.push(m);
    }
    ensure!(!methods.is_empty(), "edit.method is empty");
    let built = cfg.oracle()?;
    let oracle = &built.oracle;
    let src = cfg.label(&cfg.edit.src, oracle)?;
    let tar = cfg.label(&cfg.edit.tar, oracle)?;
    let grid = cfg.grid()?;
    let sched = cfg.schedule(grid.steps())?;
    let base_cfg = cfg.edit_config(grid.clone())?;
    check_start(&sched, &grid, base_cfg.start_step)?;
    let fixed_y0 = cfg.y0(oracle.dim())?;
    let d = oracle.dim();
    let monge_shift = built.gaussian.as_ref().and_then(|f| {
        let (ms, ss) = f.get(&src).ok()?;
        let (mt, st) = f.get(&tar).ok()?;
        (ss == st).then(|| mt - ms)
    });

    let reps: Vec<Replicate> = (0..cfg.seeds.replicates)
        .into_par_iter()
        .map(|i| -> Result<Replicate> {
            let seed = rng::replicate_seed(cfg.seeds.base, i as u64);
            let y0 = match &fixed_y0 {
                Some(y) => y.clone(),
                None => oracle.sample(&src, &mut rng::stream(seed, 1))?,
            };
            let ecfg = EditConfig {
                seed,
                ..base_cfg.clone()
            };
            let results = methods
                .iter()
                .map(|m| -> Result<(Vector, Option<EditResult>)> {
                    Ok(match m {
                        Method::Sync => {
                            let r = sync_edit(&y0, &src, &tar, oracle, &sched, &ecfg)?;
                            (r.edited.clone(), Some(r))
                        }
                        Method::Resampling => {
                            let r = resampling_ode_edit(&y0, &src, &tar, oracle, &sched, &ecfg)?;
                            (r.edited.clone(), Some(r))
                        }
                        Method::Independent => (independent_edit(&y0, &tar, oracle, &sched, &ecfg)?, None),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Replicate { seed, y0, results })
        })
        .collect::<Result<_>>()?;

    let mut out = Outputs::default();
    let mut header = vec!["replicate".to_string(), "method".into()];
    header.extend(coords("y0_", d));
    header.extend(coords("edited_", d));
    header.push("monge_sq_dev".into());
    let mut rows = Vec::new();
    for (i, rep) in reps.iter().enumerate() {
        for (m, (edited, _)) in methods.iter().zip(&rep.results) {
            let mut row = vec![i.to_string(), m.name().to_string()];
            row.extend(rep.y0.iter().map(|v| num(*v)));
            row.extend(edited.iter().map(|v| num(*v)));
            row.push(match &monge_shift {
                Some(shift) => num((edited - &rep.y0 - shift).norm_squared()),
                None => String::new(),
            });
            rows.push(row);
        }
    }
    out.csv("edits.csv", &header, &rows)?;

    let identical = src == tar && cfg.edit.w_src == cfg.edit.w_tar;
    let mut checks = Vec::new();
    let mut method_summaries = serde_json::Map::new();
    let mut monge_devs: Vec<(Method, Vec<f64>)> = Vec::new();
    let mut gap_series = Vec::new();
    for (j, m) in methods.iter().enumerate() {
        let shifts: Vec<Vector> = reps.iter().map(|r| &r.results[j].0 - &r.y0).collect();
        let n = shifts.len() as f64;
        let mean_shift = shifts.iter().fold(Vector::zeros(d), |acc, s| acc + s) / n;
        let max_dev = shifts.iter().map(|s| s.norm()).fold(0.0, f64::max);
        let mut entry = json!({
            "mean_shift": mean_shift.as_slice(),
            "max_abs_shift": max_dev,
        });
        if let Some(shift) = &monge_shift {
            let devs: Vec<f64> = shifts.iter().map(|s| (s - shift).norm_squared()).collect();
            entry["mean_sq_monge_dev"] = json!(devs.iter().sum::<f64>() / n);
            monge_devs.push((*m, devs));
        }
        method_summaries.insert(m.name().into(), entry);

        let records: Vec<ReplicateRecord> = reps
            .iter()
            .enumerate()
            .map(|(i, r)| ReplicateRecord {
                replicate: i,
                seed: r.seed,
                y0: &r.y0,
                edited: &r.results[j].0,
                result: r.results[j].1.as_ref(),
            })
            .collect();
        out.json(&format!("results_{}.json", m.name()), &records)?;
        if let Some(first) = reps.first().and_then(|r| r.results[j].1.as_ref()) {
            let mut buf = Vec::new();
            first.source_reverse.write_csv(&grid, &mut buf)?;
            out.raw(&format!("trajectory_{}_source.csv", m.name()), buf);
            let mut buf = Vec::new();
            first.target_reverse.write_csv(&grid, &mut buf)?;
            out.raw(&format!("trajectory_{}_target.csv", m.name()), buf);
            let steps = first.diagnostics.len();
            let points = (0..steps)
                .map(|k| {
                    let mean = reps
                        .iter()
                        .filter_map(|r| r.results[j].1.as_ref())
                        .map(|res| res.diagnostics[k].gap)
                        .sum::<f64>()
                        / n;
                    (first.diagnostics[k].t_rev, mean)
                })
                .collect();
            gap_series.push(Series {
                name: m.name().into(),
                points,
            });
        }

        if identical {
            match m {
                Method::Sync => checks.push((
                    "sync identical-prompt deviation within tolerance".to_string(),
                    max_dev <= cfg.edit.identity_tolerance,
                )),
                Method::Resampling => {
                    checks.push(("resampling identical-prompt output equals y0".to_string(), max_dev == 0.0))
                }
                Method::Independent => {}
            }
        }
    }

    let mut comparisons = serde_json::Map::new();
    if let Some((_, indep)) = monge_devs.iter().find(|(m, _)| *m == Method::Independent) {
        if !identical {
            for (m, devs) in monge_devs.iter().filter(|(m, _)| *m != Method::Independent) {
                let c = paired_comparison(indep, devs)?;
                checks.push((
                    format!("{} closer to the Monge image than independent (p < 0.01)", m.name()),
                    c.p_value < 0.01,
                ));
                comparisons.insert(format!("independent_minus_{}", m.name()), json!(c));
            }
        }
    }

    if !gap_series.is_empty() {
        out.text(
            "gap.svg",
            svg::line_plot(
                "mean separation between target and source states",
                "reverse time",
                "|Z - Y|",
                &gap_series,
                Scale::Linear,
                Scale::Linear,
            ),
        );
    }
    let pass = checks.iter().all(|c| c.1);
    out.json(
        "summary.json",
        &json!({
            "command": "edit",
            "src": cfg.edit.src,
            "tar": cfg.edit.tar,
            "start_step": base_cfg.start_step,
            "steps": grid.steps(),
            "replicates": cfg.seeds.replicates,
            "base_seed": cfg.seeds.base,
            "monge_shift": monge_shift.as_ref().map(|s| s.as_slice().to_vec()),
            "methods": method_summaries,
            "comparisons": comparisons,
            "checks": checks.iter().map(|(n, ok)| json!({"check": n, "pass": ok})).collect::<Vec<_>>(),
            "pass": pass,
        }),
    )?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    Ok(Outcome {
        pass,
        message: if checks.is_empty() {
            "edits written; no analytic reference applies to these prompts".to_string()
        } else if failed.is_empty() {
            format!("{} checks passed", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
        outputs: out,
    })
}

#[derive(Serialize)]
struct TraceRow {
    index: usize,
    dim: usize,
    mc_mean: f64,
    mc_se: f64,
    exact: f64,
    z: f64,
}

fn trace_sweep(cfg: &RunConfig) -> Result<Vec<TraceRow>> {
    let spec = &cfg.coupling;
    (0..spec.trace_matrices)
        .map(|j| {
            let dim = spec.trace_dims[j % spec.trace_dims.len()];
            let q = random_orthonormal(dim, rng::replicate_seed(cfg.seeds.base ^ 0x7ace, j as u64));
            let exact = expected_increment_cost(&q, spec.trace_dt)?;
            let mc = mc_increment_cost(&q, spec.trace_dt, spec.trace_draws, rng::replicate_seed(cfg.seeds.base, j as u64))?;
            let z = if mc.se > 0.0 {
                (mc.mean - exact) / mc.se
            } else if (mc.mean - exact).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            Ok(TraceRow {
                index: j,
                dim,
                mc_mean: mc.mean,
                mc_se: mc.se,
                exact,
                z,
            })
        })
        .collect()
}

pub fn coupling_bench(cfg: &RunConfig) -> Result<Outcome> {
    let spec = &cfg.coupling;
    let built = cfg.oracle()?;
    let oracle = &built.oracle;
    let src = cfg.label(&cfg.edit.src, oracle)?;
    let tar = cfg.label(&cfg.edit.tar, oracle)?;
    let grid = cfg.grid()?;
    let sched = cfg.schedule(grid.steps())?;
    let ecfg = cfg.edit_config(grid.clone())?;
    check_start(&sched, &grid, ecfg.start_step)?;
    let rules = cfg.coupling_rules(oracle.dim())?;
    ensure!(cfg.seeds.replicates >= 2, "coupling-bench needs at least 2 replicates");
    ensure!(!spec.trace_dims.is_empty() || spec.trace_matrices == 0, "coupling.trace_dims is empty");
    ensure!(spec.trace_dims.iter().all(|&d| d >= 1), "coupling.trace_dims must be positive");
    ensure!(spec.trace_draws >= 2, "coupling.trace_draws must be at least 2");
    ensure!(spec.trace_dt > 0.0 && spec.trace_dt.is_finite(), "coupling.trace_dt must be positive");
    ensure!(spec.alpha > 0.0 && spec.alpha < 1.0, "coupling.alpha must lie in (0, 1)");

    let report: GreedyReport = greedy_optimality_experiment(oracle, &src, &tar, &sched, &ecfg, &rules, cfg.seeds.replicates)?;
    let trace = trace_sweep(cfg)?;
    let reflection_exact = spec
        .trace_dims
        .iter()
        .map(|&d| {
            let y = Vector::from_element(d, 1.0);
            let q = CouplingRule::Reflection.matrix(&y, &Vector::zeros(d))?;
            Ok((expected_increment_cost(&q, spec.trace_dt)? - 4.0 * spec.trace_dt).abs() <= 1e-12)
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .all(|ok| ok);
    let trace_ok = trace.iter().all(|r| r.z.abs() <= 3.0);
    let greedy_ok = report.passes(spec.alpha);
    let pass = greedy_ok && trace_ok && reflection_exact;

    let mut out = Outputs::default();
    let rows: Vec<Vec<String>> = report
        .outcomes
        .iter()
        .map(|o| {
            let (gap, z, p) = match &o.versus_sync {
                Some(c) => (num(c.mean_difference), num(c.z), num(c.p_value)),
                None => (String::new(), String::new(), String::new()),
            };
            vec![
                o.rule.clone(),
                num(o.one_step_mean),
                num(o.one_step_se),
                gap,
                z,
                p,
                num(o.predicted_gap),
                num(o.end_to_end_mean),
                num(o.end_to_end_se),
            ]
        })
        .collect();
    let header: Vec<String> = [
        "rule",
        "one_step_mean",
        "one_step_se",
        "gap_vs_sync",
        "z",
        "p_value",
        "predicted_gap",
        "end_to_end_mean",
        "end_to_end_se",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    out.csv("greedy.csv", &header, &rows)?;
    let trace_rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                r.dim.to_string(),
                num(r.mc_mean),
                num(r.mc_se),
                num(r.exact),
                num(r.z),
            ]
        })
        .collect();
    out.csv(
        "trace.csv",
        &["index", "dim", "mc_mean", "mc_se", "exact", "z"].map(String::from),
        &trace_rows,
    )?;
    out.text(
        "greedy.svg",
        svg::bar_chart(
            "one-step squared deviation at matched states",
            "E|Z - Y|^2",
            &report
                .outcomes
                .iter()
                .map(|o| (o.rule.clone(), o.one_step_mean, o.one_step_se))
                .collect::<Vec<_>>(),
        ),
    );
    out.json(
        "summary.json",
        &json!({
            "command": "coupling-bench",
            "greedy": report,
            "greedy_pass": greedy_ok,
            "trace": trace,
            "trace_pass": trace_ok,
            "reflection_cost_exact": reflection_exact,
            "pass": pass,
        }),
    )?;
    Ok(Outcome {
        pass,
        message: format!(
            "argmin {}, greedy {}, trace identity {}",
            report.argmin,
            if greedy_ok { "ok" } else { "FAILED" },
            if trace_ok && reflection_exact { "ok" } else { "FAILED" }
        ),
        outputs: out,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Form {
    Score,
    Velocity,
}

impl Form {
    fn name(self) -> &'static str {
        match self {
            Form::Score => "score",
            Form::Velocity => "velocity",
        }
    }
}

// Distinct stream family for the velocity-form sampler.
const VELOCITY_STREAMS: u64 = 0x7e10_c17e;

pub fn marginal_check_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let spec = &cfg.marginal;
    let forms = match spec.form.as_str() {
        "score" => vec![Form::Score],
        "velocity" => vec![Form::Velocity],
        "both" => vec![Form::Score, Form::Velocity],
        other => bail!("unknown marginal.form `{other}` (use score, velocity or both)"),
    };
    let n = cfg.seeds.replicates;
    ensure!(
        n >= MIN_MARGINAL_SAMPLES,
        "marginal-check needs at least {MIN_MARGINAL_SAMPLES} replicates, got {n}"
    );
    ensure!(spec.ks_alpha > 0.0 && spec.ks_alpha < 1.0, "marginal.ks_alpha must lie in (0, 1)");
    let built = cfg.oracle()?;
    let oracle = &built.oracle;
    let label_name = spec.label.clone().unwrap_or_else(|| cfg.first_label());
    let label = cfg.label(&label_name, oracle)?;
    let grid = cfg.grid()?;
    ensure!(grid.is_symmetric(), "grid must be symmetric under t -> 1 - t");
    let sched = cfg.schedule(grid.steps())?;
    let start = spec.start_step.unwrap_or_else(|| default_start(&sched));
    check_start(&sched, &grid, start)?;
    if forms.contains(&Form::Velocity) {
        ensure!(sched.is_rectified(), "the velocity form needs the rectified schedule");
        ensure!(built.gaussian.is_some(), "the velocity form needs single-Gaussian labels");
        ensure!(spec.guidance == 1.0, "the velocity form has no guidance; set marginal.guidance = 1");
    }
    let cond = Condition::guided(label.clone(), spec.guidance);
    let (target_mean, target_var) = oracle.marginal_moments(&label, 0.0, &sched)?;
    let gaussian_target = oracle.marginal_gaussian(&label, 0.0, &sched)?.is_some();

    let mut samples: Vec<(Form, Vec<Vector>)> = Vec::new();
    for &form in &forms {
        let xs: Vec<Vector> = (0..n as u64)
            .into_par_iter()
            .map(|i| -> syncsde::Result<Vector> {
                match form {
                    Form::Score => {
                        let mut r = rng::stream(cfg.seeds.base, i);
                        fresh_reverse_sample(oracle, &label, &grid, &sched, start, &mut r, |x, t| {
                            reverse_drift(oracle, x, &cond, t, &sched)
                        })
                    }
                    Form::Velocity => {
                        let family = built.gaussian.as_ref().expect("checked above");
                        let mut r = rng::stream(cfg.seeds.base ^ VELOCITY_STREAMS, i);
                        fresh_reverse_sample(oracle, &label, &grid, &sched, start, &mut r, |x, t| {
                            rf_sde_drift(|x, l: &PromptLabel, t| rf_reverse_velocity(family, x, l, t), x, &label, t, &sched)
                        })
                    }
                }
            })
            .collect::<syncsde::Result<_>>()?;
        samples.push((form, xs));
    }

    let reports: Vec<(Form, MarginalReport)> = samples
        .iter()
        .map(|(f, xs)| Ok((*f, marginal_check(xs, &target_mean, &target_var, gaussian_target)?)))
        .collect::<Result<_>>()?;
    let d = oracle.dim();
    let ks: Vec<KsResult> = if samples.len() == 2 {
        (0..d)
            .map(|i| {
                let a: Vec<f64> = samples[0].1.iter().map(|x| x[i]).collect();
                let b: Vec<f64> = samples[1].1.iter().map(|x| x[i]).collect();
                ks_two_sample(&a, &b)
            })
            .collect::<syncsde::Result<_>>()?
    } else {
        Vec::new()
    };
    let moments_ok = reports.iter().all(|(_, r)| r.pass);
    let ks_ok = ks.iter().all(|k| k.p_value > spec.ks_alpha);
    let pass = moments_ok && ks_ok;

    let mut out = Outputs::default();
    let mut header = vec!["form".to_string(), "replicate".into()];
    header.extend(coords("x", d));
    let rows: Vec<Vec<String>> = samples
        .iter()
        .flat_map(|(f, xs)| {
            xs.iter().enumerate().map(move |(i, x)| {
                let mut row = vec![f.name().to_string(), i.to_string()];
                row.extend(x.iter().map(|v| num(*v)));
                row
            })
        })
        .collect();
    out.csv("samples.csv", &header, &rows)?;
    out.text(
        "marginal.svg",
        svg::histogram(
            &format!("endpoint samples, coordinate 0, label {label_name}"),
            "x0",
            &samples
                .iter()
                .map(|(f, xs)| (f.name().to_string(), xs.iter().map(|x| x[0]).collect()))
                .collect::<Vec<_>>(),
            40,
        ),
    );
    let mut by_form = serde_json::Map::new();
    for (f, r) in &reports {
        by_form.insert(f.name().into(), json!(r));
    }
    out.json(
        "summary.json",
        &json!({
            "command": "marginal-check",
            "label": label_name,
            "samples": n,
            "start_step": start,
            "target_mean": target_mean.as_slice(),
            "target_variance": target_var.as_slice(),
            "reports": by_form,
            "two_sample_ks": ks,
            "pass": pass,
        }),
    )?;
    let worst = reports.iter().map(|(_, r)| r.max_abs_z).fold(0.0, f64::max);
    let mut message = format!("max |z| {worst:.2}");
    if let Some(p) = ks.iter().map(|k| k.p_value).reduce(f64::min) {
        message.push_str(&format!(", min two-sample KS p {p:.3}"));
    }
    Ok(Outcome {
        pass,
        message,
        outputs: out,
    })
}
