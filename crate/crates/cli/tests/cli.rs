use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nubot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nubot"))
        .args(args)
        .env_remove("NUBOT_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nubot(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn synth(dir: &Path, scenario: &str) -> PathBuf {
    let data = dir.join(format!("data_{scenario}"));
    ok(&["synth", "--scenario", scenario, "--n", "500", "--seed", "3", "--out", p(&data)]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let src = data.join("source.csv");
    let tgt = data.join("target.csv");
    let mut args = vec![
        "train",
        "--source",
        p(&src),
        "--target",
        p(&tgt),
        "--batch-size",
        "48",
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_writes_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a");
    for f in ["source.csv", "target.csv", "source_test.csv", "target_test.csv", "config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let again = dir.path().join("again");
    ok(&["synth", "--scenario", "a", "--n", "500", "--seed", "3", "--out", p(&again)]);
    assert_eq!(read(a.join("source.csv")), read(again.join("source.csv")));
    assert_eq!(read(a.join("target_test.csv")), read(again.join("target_test.csv")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = nubot(&["synth", "--scenario", "d", "--out", p(dir.path())]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(nubot(&["frobnicate"]).status.code(), Some(1));
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"bogus": 1}}"#).unwrap();
    let out = nubot(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let missing = nubot(&[
        "predict",
        "--model",
        p(&dir.path().join("none.json")),
        "--input",
        p(&cfg),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nubot"))
        .args(["synth", "--scenario", "b", "--n", "50"])
        .env("NUBOT_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("synth").join("source.csv").exists());
    assert_eq!(nubot(&["synth", "--n", "50"]).status.code(), Some(1));
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "b");
    let run = dir.path().join("t0");
    train(&data, &run, &["--steps", "0", "--seed", "4"]);
    let model: serde_json::Value = serde_json::from_str(&read(run.join("model.json"))).unwrap();
    assert_eq!(model["step"], 0);
    assert_eq!(read(run.join("diagnostics.ndjson")), "");
    let cfg: serde_json::Value = serde_json::from_str(&read(run.join("config.json"))).unwrap();
    assert_eq!(cfg["train"]["seed"], 4);
}

#[test]
fn resumed_training_continues_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "c");
    let full = dir.path().join("full");
    train(&data, &full, &["--steps", "4"]);
    let part = dir.path().join("part");
    train(&data, &part, &["--steps", "4", "--checkpoint-every", "2"]);
    let ckpt = part.join("checkpoint_2.json");
    // Continue in a fresh directory from step 2.
    let resumed = dir.path().join("resumed");
    train(&data, &resumed, &["--steps", "4", "--resume", p(&ckpt)]);

    let full_diag = read(full.join("diagnostics.ndjson"));
    let lines: Vec<&str> = full_diag.lines().collect();
    assert_eq!(lines.len(), 4);
    let tail = read(resumed.join("diagnostics.ndjson"));
    assert_eq!(tail.lines().collect::<Vec<_>>(), lines[2..].to_vec());
    assert!(tail.lines().next().unwrap().starts_with("{\"step\":3,"));
    assert_eq!(read(full.join("model.json")), read(resumed.join("model.json")));
}

#[test]
fn cellot_mode_trains_without_solves() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "a");
    let run = dir.path().join("cellot");
    train(&data, &run, &["--steps", "3", "--mode", "cellot"]);
    let diag = read(run.join("diagnostics.ndjson"));
    let first: serde_json::Value = serde_json::from_str(diag.lines().next().unwrap()).unwrap();
    assert_eq!(first["mode"], "cellot");
    assert!(first["gamma1_mass"].is_null());
}

#[test]
fn predict_and_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "b");
    let run = dir.path().join("train");
    train(&data, &run, &["--steps", "3"]);
    let model = run.join("model.json");
    let input = data.join("source_test.csv");

    let fwd = dir.path().join("fwd");
    ok(&["predict", "--model", p(&model), "--input", p(&input), "--out", p(&fwd)]);
    let bwd = dir.path().join("bwd");
    ok(&[
        "predict",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--direction",
        "backward",
        "--out",
        p(&bwd),
    ]);
    let fwd_text = read(fwd.join("prediction.csv"));
    assert!(fwd_text.starts_with("x0,x1,mapped0,mapped1,mass_in,mass_out\n"));
    assert_eq!(fwd_text.lines().count(), 101);
    assert_ne!(fwd_text, read(bwd.join("prediction.csv")));

    let eval_args = |out: &Path| {
        vec![
            "eval".to_string(),
            "--prediction".into(),
            p(&fwd.join("prediction.csv")).into(),
            "--control".into(),
            p(&input).into(),
            "--target".into(),
            p(&data.join("target_test.csv")).into(),
            "--scenario".into(),
            "b".into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        let args = eval_args(e);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let report = read(e1.join("metrics.csv"));
    assert_eq!(report, read(e2.join("metrics.csv")));
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "scenario,method,mmd,mean_0,mean_1,mean_2,correlation");
    assert!(rows[1].starts_with("b,nubot,"));
    assert!(rows[2].starts_with("b,identity,"));
    assert!(rows[3].starts_with("b,observed,"));
    let mmd = |row: &str| row.split(',').nth(2).unwrap().parse::<f64>().unwrap();
    assert!(mmd(rows[3]) < mmd(rows[2]), "observed floor above identity");
}

#[test]
fn resolved_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "a");
    let run = dir.path().join("r1");
    train(&data, &run, &["--steps", "2"]);
    let rerun = dir.path().join("r2");
    ok(&["train", "--config", p(&run.join("config.json")), "--out", p(&rerun)]);
    assert_eq!(read(run.join("model.json")), read(rerun.join("model.json")));
    assert_eq!(read(run.join("diagnostics.ndjson")), read(rerun.join("diagnostics.ndjson")));
}

#[test]
fn oracle_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["oracle", "--out", p(dir.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS closed_form_1x1"));
    assert!(!stdout.contains("FAIL"));
    let csv = read(dir.path().join("oracle.csv"));
    assert!(csv.starts_with("check,value,threshold,pass\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}
