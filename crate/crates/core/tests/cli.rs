use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_persuasion-lq"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn check_passes_on_figure_one() {
    let dir = tempfile::tempdir().unwrap();
    let fig1 = config("fig1.json");
    let o = run(&["check", fig1.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("all checks pass"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("check.json")).unwrap()).unwrap();
    assert_eq!(report["xi_observable"]["passed"], true);
}

#[test]
fn failed_check_is_named_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let ou = config("ou_model.json");
    let o = run(
        &["check", ou.to_str().unwrap(), "--override", "model.a_x=[[0.5]]", "--override", "model.obs_b=[[0.0]]"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stabilisable_filter"));
}

#[test]
fn solver_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let ou = config("ou_model.json");
    let o = run(
        &["receiver", ou.to_str().unwrap(), "--override", "model.a_x=[[0.5]]", "--override", "model.obs_b=[[0.0]]"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["check", "--override", "bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["check", "/nonexistent/config.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["check", "--override", "smart_meter.kappa=-1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["check", config("fig1.json").to_str().unwrap()]).env("PERSUASION_LQ_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn figure_one_writes_four_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["figure", "fig1", "--override", "figure.trajectory_horizon=1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["fig1_traj_b0.csv", "fig1_traj_b5.5.csv", "fig1_traj_b55.csv", "fig1_variance.csv"]);
    let text = std::fs::read_to_string(dir.path().join("fig1_variance.csv")).unwrap();
    assert!(text.starts_with("b,sigma2_pipeline,sigma2_closed_form\n0,1,1\n"), "{}", &text[..60]);
}

#[test]
fn override_to_existing_value_changes_nothing() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fig1 = config("fig1.json");
    let fig1 = fig1.to_str().unwrap();
    let plain = run(&["stationary", fig1], a.path());
    let same = run(&["stationary", fig1, "--override", "smart_meter.kappa=0.5", "--override", "smart_meter.b=5.5"], b.path());
    assert_eq!(plain.status.code(), Some(0));
    assert_eq!(stdout(&plain), stdout(&same));
    let read = |d: &Path| std::fs::read(d.join("stationary.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn receiver_reports_figure_one_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["receiver", config("fig1.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("receiver.json")).unwrap()).unwrap();
    let g2 = v["g2"][0][0].as_f64().unwrap();
    assert!((g2 - 9.75312451187).abs() < 1e-10);
    let jr = v["ergodic_value"].as_f64().unwrap();
    assert!((jr - 113.265327868).abs() < 1e-8);
}

#[test]
fn mfg_and_sender_commands() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mfg", config("smart_meter_mfg.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mfg.json")).unwrap()).unwrap();
    assert!((v["m_star"][0].as_f64().unwrap() - 150.25 / 300.25).abs() < 1e-9);

    let o = run(&["mfg", config("fig1.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "single-receiver scenario has no mean field");

    let o = run(&["sender", config("fig1.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sender.json")).unwrap()).unwrap();
    assert_eq!(v["boundary_flag"], "interior");
}

#[test]
fn smart_meter_scenario_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["scenario", "smart-meter", config("smart_meter_mfg.json").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("DISCREPANT"));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("smart_meter_mfg_report.json")).unwrap())
            .unwrap();
    let flagged: Vec<&str> = v["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["consistent"] == false)
        .map(|e| e["quantity"].as_str().unwrap())
        .collect();
    assert_eq!(flagged, ["beta", "ell_hat", "m_star"]);
}

#[test]
fn simulate_writes_summary_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["simulate", config("ou_model.json").to_str().unwrap(), "--override", "sim.n_paths=8", "--override", "sim.horizon=5"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("simulate_paths.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.starts_with("path,receiver_mean_cost,X0_T,X_hat0_T\n"));
}
