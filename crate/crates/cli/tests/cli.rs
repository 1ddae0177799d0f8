use std::process::Command;

fn trajcast() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajcast"))
}

fn error_line(out: &std::process::Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(err.lines().count(), 1, "{err}");
    err
}

#[test]
fn minimal_run_all_then_report_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    let st = trajcast()
        .args(["init-config", "--env", "linear-toy", "--minimal", "--path"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(st.success());
    let out_dir = dir.path().join("run");
    let out = trajcast()
        .arg("run-all")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--seed", "5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("ok stage=")).count(), 7);
    assert!(out_dir.join("report/brier_table.csv").is_file());

    let again = trajcast()
        .arg("report")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--seed", "5"])
        .output()
        .unwrap();
    assert!(again.status.success());
}

#[test]
fn run_all_stops_at_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajcast()
        .args(["run-all", "--preset", "linear-toy", "--stage", "generate", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/train_low.jsonl").is_file());
    assert!(!dir.path().join("models").exists());
}

#[test]
fn missing_upstream_reports_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajcast()
        .args(["forecast", "--preset", "linear-toy", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(error_line(&out).starts_with("error: category=missing-artifact message="));
}

#[test]
fn invalid_config_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = String::from_utf8(
        trajcast()
            .args(["init-config", "--env", "linear-toy", "--minimal"])
            .output()
            .unwrap()
            .stdout,
    )
    .unwrap();
    std::fs::write(
        &cfg,
        text.replace("n_train_low_epistemic = 20", "n_train_low_epistemic = 10"),
    )
    .unwrap();
    let out = trajcast().arg("run-all").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let line = error_line(&out);
    assert!(
        line.starts_with("error: category=config") && line.contains("10x"),
        "{line}"
    );

    let out = trajcast().args(["run-all", "--stage", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: category=usage"));
}
