use std::path::Path;
use std::process::{Command, Output};

fn syncsde(dir: &Path, args: &[&str], config: Option<&str>) -> (Output, std::path::PathBuf) {
    let out = dir.join("out");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_syncsde"));
    cmd.args(args).arg("--out").arg(&out);
    if let Some(text) = config {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(&path);
    }
    (cmd.output().unwrap(), out)
}

fn assert_no_outputs(out: &Path) {
    assert!(!out.exists() || std::fs::read_dir(out).unwrap().next().is_none());
}

const GAUSS_1D: &str = r#"
schedule = { kind = "constant_ou", alpha = 1.0, g = 1.0 }

[oracle.data]
mean = [0.0]
std = 1.0
"#;

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = syncsde(dir.path(), &["edit"], Some("schedule = [unclosed"));
    assert_eq!(o.status.code(), Some(2));
    assert_no_outputs(&out);
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{GAUSS_1D}\n[seeds]\nreplicate = 3\n");
    let (o, _) = syncsde(dir.path(), &["reversal-check"], Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_orthonormal_fixed_rule_exits_2() {
    let cfg = r#"
schedule = { kind = "constant_ou", alpha = 1.0, g = 1.0 }

[grid]
steps = 16

[oracle.src]
mean = [-1.0, 0.0]
std = 0.5

[oracle.tar]
mean = [1.0, 0.0]
std = 0.5

[edit]
start_step = 8

[seeds]
replicates = 50

[coupling]
rules = ["synchronous"]
random_rules = 0
fixed = [[[1.0, 0.0], [0.0, 2.0]]]
trace_matrices = 2
trace_draws = 1000
"#;
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = syncsde(dir.path(), &["coupling-bench"], Some(cfg));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_no_outputs(&out);
}

#[test]
fn too_few_marginal_samples_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{GAUSS_1D}\n[grid]\nsteps = 16\n\n[seeds]\nreplicates = 50\n");
    let (o, out) = syncsde(dir.path(), &["marginal-check"], Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert_no_outputs(&out);
}

#[test]
fn unknown_label_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{GAUSS_1D}\n[edit]\nsrc = \"data\"\ntar = \"missing\"\n");
    let (o, _) = syncsde(dir.path(), &["edit"], Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_step_count_reports_without_a_slope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{GAUSS_1D}\n[reversal]\nsteps = [32]\n");
    let (o, out) = syncsde(dir.path(), &["reversal-check"], Some(&cfg));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("null"));
    assert!(out.join("convergence.csv").exists());
}

#[test]
fn synchronous_only_bench_passes() {
    let cfg = r#"
schedule = { kind = "constant_ou", alpha = 1.0, g = 1.0 }

[grid]
steps = 16

[oracle.src]
mean = [-1.0, 0.0]
std = 0.5

[oracle.tar]
mean = [1.0, 0.0]
std = 0.5

[edit]
start_step = 8

[seeds]
replicates = 50

[coupling]
rules = ["synchronous"]
random_rules = 0
trace_matrices = 2
trace_draws = 1000
"#;
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = syncsde(dir.path(), &["coupling-bench"], Some(cfg));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(out.join("greedy.csv").exists());
}

#[test]
fn identical_prompt_edit_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{GAUSS_1D}\n[grid]\nsteps = 64\n\n[edit]\nsrc = \"data\"\ntar = \"data\"\nstart_step = 0\n\n[seeds]\nreplicates = 20\n"
    );
    let (o, out) = syncsde(dir.path(), &["edit"], Some(&cfg));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(out.join("edits.csv")).unwrap();
    assert!(csv.starts_with("replicate,method"));
    assert_eq!(csv.lines().count(), 1 + 3 * 20);
}

#[test]
fn zero_jobs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = syncsde(dir.path(), &["reversal-check", "--jobs", "0"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out) = syncsde(dir.path(), &["reversal-check", "--seed", "1"], None);
    assert_eq!(a.status.code(), Some(0));
    let first = std::fs::read(out.join("convergence.csv")).unwrap();
    let (b, out) = syncsde(dir.path(), &["reversal-check", "--seed", "2"], None);
    assert_eq!(b.status.code(), Some(0));
    assert_ne!(first, std::fs::read(out.join("convergence.csv")).unwrap());
}
