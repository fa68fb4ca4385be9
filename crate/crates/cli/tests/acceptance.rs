//! Acceptance suite. Every criterion runs in sequence inside one test so the
//! wall-clock limits are measured without competing test threads. Each
//! criterion prints one PASS/FAIL line; the test fails if any criterion does.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use syncsde::coupling::{
    expected_increment_cost, greedy_optimality_experiment, mc_increment_cost, random_orthonormal, CouplingRule,
};
use syncsde::editing::{
    fresh_reverse_sample, independent_edit, resampling_ode_edit, reverse_drift, sync_edit, EditConfig,
};
use syncsde::paths::{backward_increments, forward_closed_form, reverse_trajectory, sample_brownian, TimeGrid};
use syncsde::rng;
use syncsde::schedule::NoiseSchedule;
use syncsde::scores::{
    rf_reverse_velocity, rf_sde_drift, Condition, ConditionalGaussianFamily, ConditionalMixtureFamily,
    GaussianComponent, PromptLabel, ScoreOracle,
};
use syncsde::verify::{
    convergence_study, fit_slope, ks_two_sample, marginal_check, median, paired_comparison, ReversalSetup, StartAt,
};
use syncsde::Vector;

struct Verdict {
    pass: bool,
    detail: String,
}

fn run(id: usize, name: &str, limit_secs: u64, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(limit_secs);
    let pass = v.pass && in_time;
    println!(
        "{} criterion {id:>2} {name}: {} [{:.2}s of {limit_secs}s]",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn vec1(x: f64) -> Vector {
    Vector::from_vec(vec![x])
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn criterion_1() -> Verdict {
    let setup = ReversalSetup {
        oracle: ScoreOracle::gaussian("data", vec1(0.0), 1.0).unwrap(),
        cond: Condition::plain("data"),
        sched: NoiseSchedule::constant_ou(1.0, 1.0).unwrap(),
        y0: None,
        start: StartAt::Step(0),
        base_seed: 1,
    };
    let table = convergence_study(&setup, &[16, 32, 64, 128], 100).unwrap();
    let slope = table.slope.unwrap();
    let medians: Vec<String> = table.rows.iter().map(|r| format!("{:.4}", r.median_error)).collect();
    Verdict {
        pass: table.is_monotone() && slope >= 0.8,
        detail: format!("medians [{}], order {slope:.3} (>= 0.8)", medians.join(", ")),
    }
}

fn criterion_2() -> Verdict {
    // ΔW̄_k must be N(0, Δt) for every k; the variance gate uses the
    // empirical fourth moment for its standard error.
    let n_steps = 64;
    let seeds = 10_000u64;
    let grid = TimeGrid::uniform(n_steps).unwrap();
    let sched = NoiseSchedule::constant_ou(0.0, 1.0).unwrap();
    let oracle = ScoreOracle::gaussian("data", vec1(0.0), 1.0).unwrap();
    let cond = Condition::plain("data");
    let increments: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let seed = rng::replicate_seed(2, i);
            let y0 = oracle.sample(&"data".into(), &mut rng::stream(seed, 1)).unwrap();
            let path = sample_brownian(&grid, 1, &mut rng::seeded(seed)).unwrap();
            let rev = reverse_trajectory(&forward_closed_form(&y0, &sched, &grid, &path).unwrap(), &grid).unwrap();
            let bw = backward_increments(&path, &rev, &oracle, &cond, &sched, &grid, 0).unwrap();
            bw.increments().iter().map(|v| v[0]).collect()
        })
        .collect();
    let nf = seeds as f64;
    let mut worst: f64 = 0.0;
    for k in 0..n_steps {
        let xs: Vec<f64> = increments.iter().map(|v| v[k]).collect();
        let m = xs.iter().sum::<f64>() / nf;
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / nf;
        let var = m2 * nf / (nf - 1.0);
        let se = ((m4 - m2 * m2) / nf).sqrt();
        worst = worst.max(((var - grid.dt(k)) / se).abs());
    }
    Verdict {
        pass: worst <= 5.0,
        detail: format!("max |z| of Var(dW_k) - dt over {n_steps} steps = {worst:.2} (<= 5)"),
    }
}

fn criterion_3() -> Verdict {
    let dt = 1.0 / 64.0;
    let dims = [1usize, 2, 4, 8];
    let mut worst: f64 = 0.0;
    for j in 0..50u64 {
        let d = dims[j as usize % dims.len()];
        let q = random_orthonormal(d, 1000 + j);
        let exact = expected_increment_cost(&q, dt).unwrap();
        let mc = mc_increment_cost(&q, dt, 1_000_000, 3000 + j).unwrap();
        let z = if mc.se > 0.0 { (mc.mean - exact) / mc.se } else { (mc.mean - exact) * f64::INFINITY };
        worst = worst.max(if z.is_nan() { 0.0 } else { z.abs() });
    }
    let reflection_ok = dims.iter().all(|&d| {
        let y = Vector::from_fn(d, |i, _| 1.0 + i as f64);
        let q = CouplingRule::Reflection.matrix(&y, &Vector::zeros(d)).unwrap();
        (expected_increment_cost(&q, dt).unwrap() - 4.0 * dt).abs() <= 1e-14
    });
    Verdict {
        pass: worst <= 3.0 && reflection_ok,
        detail: format!("max |z| over 50 matrices = {worst:.2} (<= 3), reflection cost 4dt: {reflection_ok}"),
    }
}

fn criterion_4() -> Verdict {
    let oracle: ScoreOracle = ConditionalGaussianFamily::new([
        ("src".into(), Vector::from_vec(vec![-1.0, 0.0]), 0.5),
        ("tar".into(), Vector::from_vec(vec![1.0, 0.5]), 0.5),
    ])
    .unwrap()
    .into();
    let sched = NoiseSchedule::constant_ou(1.0, 1.0).unwrap();
    let cfg = EditConfig::new(64, 32, 4).unwrap();
    let mut rules = vec![CouplingRule::Synchronous, CouplingRule::Reflection];
    rules.extend((0..10).map(|i| CouplingRule::RandomOrthonormal { seed: 400 + i }));
    let rep = greedy_optimality_experiment(&oracle, &"src".into(), &"tar".into(), &sched, &cfg, &rules, 1000).unwrap();
    let worst_p = rep
        .outcomes
        .iter()
        .filter_map(|o| o.versus_sync.map(|c| c.p_value))
        .fold(0.0, f64::max);
    let refl = &rep.outcomes[1];
    let c = refl.versus_sync.unwrap();
    let gap_z = (c.mean_difference - 4.0 * cfg.grid.dt(32)) / c.se;
    Verdict {
        pass: rep.passes(0.01) && gap_z.abs() <= 3.0,
        detail: format!(
            "argmin {}, max paired p {worst_p:.2e} (< 0.01), reflection gap z vs 4dt {gap_z:.2}",
            rep.argmin
        ),
    }
}

fn criterion_5() -> Verdict {
    let oracle = ScoreOracle::gaussian("c", vec1(0.0), 1.0).unwrap();
    let sched = NoiseSchedule::constant_ou(1.0, 1.0).unwrap();
    let label = PromptLabel::from("c");
    let ns = [16usize, 32, 64, 128];
    let medians: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let errs: Vec<f64> = (0..100u64)
                .into_par_iter()
                .map(|i| {
                    let seed = rng::replicate_seed(5, i);
                    let y0 = oracle.sample(&label, &mut rng::stream(seed, 1)).unwrap();
                    let cfg = EditConfig::new(n, 0, seed).unwrap();
                    let r = sync_edit(&y0, &label, &label, &oracle, &sched, &cfg).unwrap();
                    r.source_reverse.sup_distance(&r.target_reverse).unwrap()
                })
                .collect();
            median(&errs)
        })
        .collect();
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let order = -fit_slope(&lx, &ly).unwrap();
    let monotone = medians.windows(2).all(|w| w[1] < w[0]);
    let exact = (0..100u64).all(|i| {
        let y0 = vec1(-1.5 + 0.03 * i as f64);
        let cfg = EditConfig::new(32, (i % 8) as usize, i).unwrap();
        resampling_ode_edit(&y0, &label, &label, &oracle, &sched, &cfg).unwrap().edited == y0
    });
    Verdict {
        pass: monotone && order >= 0.8 && exact,
        detail: format!("sync retrace order {order:.3} (>= 0.8, monotone {monotone}), resampling returns y0 exactly: {exact}"),
    }
}

fn transport_run(sched: &NoiseSchedule, start: usize) -> (bool, String) {
    let oracle: ScoreOracle = ConditionalGaussianFamily::new([
        ("src".into(), vec1(-2.0), 0.5),
        ("tar".into(), vec1(2.0), 0.5),
    ])
    .unwrap()
    .into();
    let (src, tar) = (PromptLabel::from("src"), PromptLabel::from("tar"));
    let rows: Vec<(f64, f64, f64)> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let seed = rng::replicate_seed(6, i);
            let y0 = oracle.sample(&src, &mut rng::stream(seed, 1)).unwrap();
            let cfg = EditConfig::new(128, start, seed).unwrap();
            let s = sync_edit(&y0, &src, &tar, &oracle, sched, &cfg).unwrap().edited[0] - y0[0];
            let r = resampling_ode_edit(&y0, &src, &tar, &oracle, sched, &cfg).unwrap().edited[0] - y0[0];
            let ind = independent_edit(&y0, &tar, &oracle, sched, &cfg).unwrap()[0] - y0[0];
            (s, r, ind)
        })
        .collect();
    let sync: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let resamp: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let indep: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let gate = |v: &[f64]| {
        let (m, se) = mean_se(v);
        ((m - 4.0).abs() <= 3.0 * se, m, se)
    };
    let (sync_ok, sm, sse) = gate(&sync);
    let (res_ok, rm, rse) = gate(&resamp);
    let sq = |v: &[f64]| v.iter().map(|x| (x - 4.0).powi(2)).collect::<Vec<f64>>();
    let cmp = paired_comparison(&sq(&indep), &sq(&sync)).unwrap();
    let mark = |ok: bool| if ok { "ok" } else { "off" };
    (
        sync_ok && res_ok && cmp.p_value < 0.01,
        format!(
            "sync {sm:.5} ± {sse:.1e} ({}), resampling {rm:.7} ± {rse:.1e} ({}), indep > sync p {:.1e}",
            mark(sync_ok),
            mark(res_ok),
            cmp.p_value
        ),
    )
}

fn criterion_6() -> Verdict {
    let (ou_ok, ou) = transport_run(&NoiseSchedule::constant_ou(1.0, 2f64.sqrt()).unwrap(), 0);
    let (rf_ok, rf) = transport_run(&NoiseSchedule::rectified_for_steps(128).unwrap(), 1);
    Verdict {
        pass: ou_ok && rf_ok,
        detail: format!("constant OU: {ou}; rectified flow from step 1: {rf}"),
    }
}

fn marginal_run(oracle: &ScoreOracle, sched: &NoiseSchedule, steps: usize, start: usize, base: u64) -> (bool, f64) {
    let grid = TimeGrid::uniform(steps).unwrap();
    let label = oracle.labels().next().unwrap().clone();
    let cond = Condition::plain(label.clone());
    let xs: Vec<Vector> = (0..10_000u64)
        .into_par_iter()
        .map(|i| {
            fresh_reverse_sample(oracle, &label, &grid, sched, start, &mut rng::stream(base, i), |x, t| {
                reverse_drift(oracle, x, &cond, t, sched)
            })
            .unwrap()
        })
        .collect();
    let (mean, var) = oracle.marginal_moments(&label, 0.0, sched).unwrap();
    let rep = marginal_check(&xs, &mean, &var, false).unwrap();
    (rep.pass, rep.max_abs_z)
}

fn criterion_7() -> Verdict {
    let comp = |w, m: Vec<f64>, s| GaussianComponent {
        weight: w,
        mean: Vector::from_vec(m),
        std: s,
    };
    let mixture: ScoreOracle = ConditionalMixtureFamily::new([(
        "data".into(),
        vec![comp(0.3, vec![-1.5, 0.5], 0.4), comp(0.7, vec![1.0, -0.5], 0.6)],
    )])
    .unwrap()
    .into();
    let ou = NoiseSchedule::constant_ou(1.0, 1.0).unwrap();
    let (ou_ok, ou_z) = marginal_run(&mixture, &ou, 512, 0, 70);
    let gaussian = ScoreOracle::gaussian("data", Vector::from_vec(vec![1.0, -0.5]), 0.5).unwrap();
    let rf = NoiseSchedule::rectified_for_steps(512).unwrap();
    let (rf_ok, rf_z) = marginal_run(&gaussian, &rf, 512, 1, 71);
    Verdict {
        pass: ou_ok && rf_ok,
        detail: format!("max |z| constant OU mixture {ou_z:.2}, rectified flow {rf_z:.2} (<= 3)"),
    }
}

fn criterion_8() -> Verdict {
    let family = ConditionalGaussianFamily::new([("c".into(), Vector::from_vec(vec![1.5, -0.5]), 0.4)]).unwrap();
    let oracle: ScoreOracle = family.clone().into();
    let label = PromptLabel::from("c");
    let cond = Condition::plain("c");
    let steps = 256;
    let sched = NoiseSchedule::rectified_for_steps(steps).unwrap();
    let velocity = |x: &Vector, l: &PromptLabel, t: f64| rf_reverse_velocity(&family, x, l, t);

    let mut worst: f64 = 0.0;
    for i in 1..=50 {
        let t_rev = i as f64 / 51.0;
        for j in 0..10 {
            let x = Vector::from_vec(vec![-3.0 + 0.6 * j as f64, 2.0 - 0.4 * j as f64]);
            let v = rf_sde_drift(velocity, &x, &label, t_rev, &sched).unwrap();
            let s = reverse_drift(&oracle, &x, &cond, t_rev, &sched).unwrap();
            worst = worst.max((v - s).amax());
        }
    }

    let grid = TimeGrid::uniform(steps).unwrap();
    let sample = |base: u64, velocity_form: bool| -> Vec<Vector> {
        (0..10_000u64)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(base, i);
                if velocity_form {
                    fresh_reverse_sample(&oracle, &label, &grid, &sched, 1, &mut r, |x, t| {
                        rf_sde_drift(velocity, x, &label, t, &sched)
                    })
                } else {
                    fresh_reverse_sample(&oracle, &label, &grid, &sched, 1, &mut r, |x, t| {
                        reverse_drift(&oracle, x, &cond, t, &sched)
                    })
                }
                .unwrap()
            })
            .collect()
    };
    let a = sample(80, false);
    let b = sample(81, true);
    let min_p = (0..2)
        .map(|i| {
            let xa: Vec<f64> = a.iter().map(|v| v[i]).collect();
            let xb: Vec<f64> = b.iter().map(|v| v[i]).collect();
            ks_two_sample(&xa, &xb).unwrap().p_value
        })
        .fold(1.0, f64::min);
    Verdict {
        pass: worst <= 1e-8 && min_p > 0.01,
        detail: format!("max drift gap {worst:.2e} (<= 1e-8), min two-sample KS p {min_p:.3} (> 0.01)"),
    }
}

fn criterion_9() -> Verdict {
    let sched = NoiseSchedule::rectified_flow(0.999).unwrap();
    let mut r = rng::seeded(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng::standard_normal_vector(1, &mut r)[0].abs().fract() * 0.999;
        let m = sched.decay_m(t).unwrap();
        let v = sched.perturbation_variance(t).unwrap();
        let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
        worst = worst
            .max(rel(m, 1.0 - t))
            .max(rel(v, t * t))
            .max(rel(sched.quadrature_decay_m(t).unwrap(), 1.0 - t))
            .max(rel(sched.quadrature_variance(t).unwrap(), t * t));
    }
    Verdict {
        pass: worst <= 1e-6,
        detail: format!("max relative error {worst:.2e} (<= 1e-6)"),
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_syncsde");
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for cmd in ["reversal-check", "edit", "coupling-bench", "marginal-check"] {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = tmp.path().join(format!("{cmd}-{run}"));
            let status = Command::new(bin)
                .args([cmd, "--seed", "11", "--out"])
                .arg(&dir)
                .output()
                .unwrap();
            ok &= status.status.code() == Some(0);
            outputs.push(read_tree(&dir));
        }
        let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
        ok &= same;
        notes.push(format!("{cmd} {}", if same { "identical" } else { "DIFFERS" }));
    }
    Verdict {
        pass: ok,
        detail: notes.join(", "),
    }
}

#[test]
fn acceptance_criteria() {
    let results = [
        run(1, "pathwise time reversal", 10, criterion_1),
        run(2, "backward-increment law", 30, criterion_2),
        run(3, "trace identity", 60, criterion_3),
        run(4, "greedy optimality", 60, criterion_4),
        run(5, "identical-prompt degeneracy", 5, criterion_5),
        run(6, "editing as transport", 60, criterion_6),
        run(7, "marginal soundness", 60, criterion_7),
        run(8, "rectified-flow equivalence", 60, criterion_8),
        run(9, "closed-form kernels", 1, criterion_9),
        run(10, "determinism", 10, criterion_10),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
