use fosls_cli::*;
use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;

fn config(text: &str, dir: &Path) -> RunConfig {
    let mut c = RunConfig::from_toml(text).unwrap();
    c.outputs.dir = dir.to_path_buf();
    c
}

const SMALL: &str = "
[train]
iterations = 30
log_every = 10
[metrics]
fine_nodes = [4001]
tv_nodes = 401
sample_nodes = 11
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fosls"))
}

#[test]
fn zero_iteration_run_reports_the_initial_space() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_run(&config("[train]\niterations = 0\n[metrics]\nfine_nodes = [4001]", dir.path())).unwrap();
    assert!(out.history.is_empty());
    let report = out.report.unwrap();
    assert!(report.rel_u > 0.0 && report.rel_u < 1.0);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(doc["iterations_completed"], 0);
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert!(dir.path().join("checkpoints/final.json").exists());
}

#[test]
fn run_writes_every_artifact_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(SMALL, dir.path());
    c.outputs.checkpoint_period = 10;
    c.train.variance_probe = Some(fosls_cli::config::ProbeSection { period: 15, resamples: 3 });
    let out = cmd_run(&c).unwrap();
    assert_eq!(out.history.len(), 30);
    assert_eq!(out.probes.len(), 2);
    for (file, header) in [
        ("history.csv", fosls::training::HISTORY_HEADER),
        ("poincare_updates.csv", output::POINCARE_HEADER),
        ("variance.csv", output::VARIANCE_HEADER),
        ("samples.csv", output::SAMPLES_HEADER_1D),
    ] {
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(text.lines().next().unwrap(), header, "{file}");
    }
    let samples = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 12);
    for i in [10, 20, 30] {
        assert!(dir.path().join(format!("checkpoints/iter_{i:06}.json")).exists());
    }
    // the checkpointed network reloads
    let ck: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("checkpoints/final.json")).unwrap()).unwrap();
    let net = fosls::network::Network::from_json(&ck["network"].to_string()).unwrap();
    assert_eq!(net, out.solution.unwrap().net);
    assert_eq!(ck["config_hash"].as_str().unwrap(), c.hash());
}

#[test]
fn probes_do_not_change_the_trajectory() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let plain = cmd_run(&config(SMALL, a.path())).unwrap();
    let mut c = config(SMALL, b.path());
    c.train.variance_probe = Some(fosls_cli::config::ProbeSection { period: 10, resamples: 2 });
    let probed = cmd_run(&c).unwrap();
    assert_eq!(plain.history, probed.history);
}

#[test]
fn same_seed_reproduces_history_bytes() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (i, d) in dirs.iter().enumerate() {
        let mut c = config(SMALL, d.path());
        c.base_seed = if i == 2 { 9 } else { 3 };
        cmd_run(&c).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("history.csv")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
    assert_ne!(read(&dirs[0]), read(&dirs[2]));
}

#[test]
fn sweep_writes_combined_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_sweep_kappa(&config(SMALL, dir.path()), &[1.0, 1e3]).unwrap();
    assert_eq!(out.runs.len(), 2);
    assert_eq!(out.poincare.len(), 2);
    assert!((out.poincare[0].reference - 1.0 / PI).abs() < 1e-12);
    assert_eq!(out.robustness.len(), 6);
    let robust = std::fs::read_to_string(dir.path().join("robustness.csv")).unwrap();
    assert_eq!(robust.lines().next().unwrap(), output::ROBUSTNESS_HEADER);
    assert_eq!(robust.lines().count(), 7);
    assert!(dir.path().join("kappa0_1e3/history.csv").exists());
    let wrong = config("[problem]\nid = \"smooth1d\"", dir.path());
    assert!(matches!(cmd_sweep_kappa(&wrong, &[1.0]), Err(CliError::Config(_))));
}

#[test]
fn variance_study_marks_each_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(SMALL, dir.path());
    c.problem.id = "smooth1d".into();
    c.variance.fosls_points = vec![50];
    c.variance.ritz_points = vec![300];
    c.variance.iterations = 20;
    let entries = cmd_variance_study(&c).unwrap();
    assert_eq!(entries.len(), 2);
    assert!(dir.path().join("traj_fosls_50.csv").exists());
    assert!(dir.path().join("traj_deep-ritz_300.csv").exists());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stability.json")).unwrap()).unwrap();
    assert_eq!(doc.as_array().unwrap().len(), 2);
    assert_eq!(doc[1]["loss"], "deep-ritz");
}

#[test]
fn gibbs_study_reports_the_jump_reference() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(SMALL, dir.path());
    c.train.iterations = Some(5);
    let out = cmd_gibbs_study(&c).unwrap();
    assert!((out.jump_reference - 2.0 * PI * (1.0 - 1.0 / 3.0)).abs() < 1e-9);
    assert_eq!(out.entries.len(), 3);
    let tv = std::fs::read_to_string(dir.path().join("tv.csv")).unwrap();
    assert_eq!(tv.lines().count(), 4);
    assert!(tv.contains("4.18879"));
    let profile = std::fs::read_to_string(dir.path().join("gradient_error_tanh_L1.csv")).unwrap();
    assert_eq!(profile.lines().count(), 402);
}

#[test]
fn zero_iteration_2d_run_dumps_fields() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("[train]\niterations = 0\n[metrics]\nfine_nodes = [41, 41]\nsample_nodes = 6", dir.path());
    let out = cmd_run2d(&c, "plane2d", false).unwrap();
    assert!(out.report.is_some());
    let fields = std::fs::read_to_string(dir.path().join("fields.csv")).unwrap();
    assert_eq!(fields.lines().next().unwrap(), output::FIELDS_HEADER_2D);
    assert_eq!(fields.lines().count(), 37);
    assert!(matches!(cmd_run2d(&c, "interface1d", false), Err(CliError::Config(_))));
}

#[test]
fn poincare_check_on_the_smooth_problem() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("[problem]\nid = \"smooth1d\"\n[metrics]\nfine_nodes = [20001]", dir.path());
    let r = cmd_poincare_check(&c).unwrap();
    assert!(r.estimate <= 1.0 / PI && r.rel_error.unwrap() < 0.05);
    assert!(dir.path().join("poincare_check.json").exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[network]\nactivation = \"relu\"\n").unwrap();
    let status = bin().args(["run", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    std::fs::write(&bad, "[train]\nunknown_key = 1\n").unwrap();
    let status = bin().args(["run", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));

    // a huge step drives the parameters to overflow
    let blowup = dir.path().join("blowup.toml");
    std::fs::write(
        &blowup,
        "[train]\niterations = 50\nlearning_rate = 1e300\ndecay_tail = 0\nlog_every = 0\n[metrics]\nfine_nodes = [101]\n",
    )
    .unwrap();
    let out = dir.path().join("blowup");
    let status = bin().args(["run", "--config"]).arg(&blowup).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(3));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(doc["aborted"].as_str().unwrap().contains("seed"));

    let ok = dir.path().join("ok.toml");
    std::fs::write(&ok, "[train]\niterations = 2\n[metrics]\nfine_nodes = [101]\n").unwrap();
    let status = bin()
        .args(["run", "--seed", "4", "--config"])
        .arg(&ok)
        .arg("--out")
        .arg(dir.path().join("ok"))
        .env("FOSLS_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let status = bin().args(["run", "--config"]).arg(&ok).env("FOSLS_THREADS", "zero").status().unwrap();
    assert_eq!(status.code(), Some(2));
}
