use std::process::{Command, Output};

fn essd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_essd"))
        .args(args)
        .env("ESSD_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = essd(args);
    assert!(
        out.status.success(),
        "essd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_string()
}

#[test]
fn smoke_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let d = dir.to_str().unwrap();
    let conf = dir.join("run.conf");
    let c = conf.to_str().unwrap();

    let listed = ok(&[
        "generate",
        "--preset",
        "smoke",
        "--seed",
        "3",
        "--out",
        d,
        "--workers",
        "1",
    ]);
    assert!(
        listed.contains("patients.csv") && listed.contains("run.conf"),
        "{listed}"
    );
    for f in [
        "patients.csv",
        "events.csv",
        "prescriptions.csv",
        "event_tree.csv",
        "reference.csv",
        "ground_truth.json",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }

    ok(&["features", "--config", c]);
    let features = std::fs::read_to_string(dir.join("features.csv")).unwrap();
    assert!(features.starts_with("family_prefix,event_code,x1,"));
    assert!(features.lines().count() > 10);

    ok(&["train", "--config", c]);
    let model = std::fs::read_to_string(dir.join("model.txt")).unwrap();
    assert!(model.starts_with("essd-forest v1\n"));

    ok(&["evaluate", "--config", c]);
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert_eq!(
        report.matches("\"held_out\"").count(),
        3,
        "one evaluation per held-out family"
    );

    ok(&["signal", "--config", c]);
    let signals = std::fs::read_to_string(dir.join("signals.csv")).unwrap();
    let mut lines = signals.lines();
    assert_eq!(
        lines.next(),
        Some("rank,family_prefix,event_code,probability,signal,label")
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "1");
    let p: f64 = first[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"signal\""));
}

#[test]
fn missing_config_is_a_one_line_error() {
    let out = essd(&["features", "--config", "/nonexistent/run.conf"]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error: "), "{line}");
    assert!(line.contains("/nonexistent/run.conf"), "{line}");
}

#[test]
fn usage_errors_exit_with_two() {
    let out = essd(&["generate", "--preset", "smoke"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("--out"));

    let out = essd(&["features"]);
    assert_eq!(out.status.code(), Some(2));

    let out = essd(&["bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_preset_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = essd(&[
        "generate",
        "--preset",
        "huge",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("huge"), "{}", stderr_line(&out));
}

#[test]
fn bad_config_value_names_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    std::fs::write(
        &conf,
        "families = 05-01-01-01, 05-01-01-02\nseed = twelve\n",
    )
    .unwrap();
    let out = essd(&["features", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.contains("bad.conf") && line.contains('2'), "{line}");
}
