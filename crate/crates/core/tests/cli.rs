use std::path::Path;
use std::process::{Command, Output};

fn dimts(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dimts"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dimts(&["--help"], dir.path())), 0);
    assert_eq!(code(&dimts(&["train", "--help"], dir.path())), 0);
    assert_eq!(code(&dimts(&[], dir.path())), 1);
    assert_eq!(code(&dimts(&["frobnicate"], dir.path())), 1);
    assert_eq!(
        code(&dimts(&["train", "x.csv", "--steps", "many"], dir.path())),
        1
    );
    assert_eq!(
        code(&dimts(
            &["evaluate", "a.csv", "b.csv", "--distance", "l2"],
            dir.path()
        )),
        1
    );
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "no_such_key = 3\n").unwrap();
    dimts(&["synth", "sines", "s.csv", "--rows", "100"], dir.path());
    let out = dimts(&["--config", "bad.cfg", "ingest", "s.csv"], dir.path());
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn data_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dimts(&["ingest", "missing.csv"], dir.path())), 2);
    std::fs::write(dir.path().join("text.csv"), "a,b\n1,2\n3,oops\n").unwrap();
    let out = dimts(&["ingest", "text.csv", "--length", "1"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    std::fs::write(dir.path().join("short.csv"), "a,b\n1,2\n3,4\n").unwrap();
    assert_eq!(
        code(&dimts(
            &["ingest", "short.csv", "--length", "24"],
            dir.path()
        )),
        2
    );
}

#[test]
fn diverging_training_exits_with_3_and_writes_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("hot.cfg"),
        "lr = 1e200\nhidden_dim = 8\nstate_dim = 2\ntime_features = 8\ndiffusion_steps = 20\n",
    )
    .unwrap();
    assert_eq!(
        code(&dimts(
            &["synth", "sines", "s.csv", "--rows", "120"],
            dir.path()
        )),
        0
    );
    let out = dimts(
        &[
            "--config",
            "hot.cfg",
            "--length",
            "12",
            "--steps",
            "50",
            "--out-dir",
            "run",
            "train",
            "s.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/nan_diagnostic.txt").exists());
}

#[test]
fn analyze_and_evaluate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&dimts(
            &["synth", "block", "b.csv", "--rows", "300"],
            dir.path()
        )),
        0
    );
    assert_eq!(
        code(&dimts(
            &["--out-dir", "an", "analyze-channels", "b.csv"],
            dir.path()
        )),
        0
    );
    let text = std::fs::read_to_string(dir.path().join("an/channels.txt")).unwrap();
    assert!(text.contains("order"), "{text}");
    let out = dimts(
        &[
            "--out-dir",
            "ev",
            "--length",
            "24",
            "evaluate",
            "b.csv",
            "b.csv",
            "--bins",
            "20",
            "--max-lag",
            "4",
            "--distance",
            "kl",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/report.json")).unwrap())
            .unwrap();
    assert_eq!(json["acd"].as_f64(), Some(0.0));
}
