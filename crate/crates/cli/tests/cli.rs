use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn airscl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airscl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn airscl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = airscl(args);
    assert_eq!(code(&out), 0, "airscl {args:?} failed:\n{}", stderr(&out));
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

/// One small subject, preprocessed once and shared by the training tests.
fn shared() -> &'static (TempDir, PathBuf) {
    static DATA: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        let pre = dir.path().join("pre");
        ok(&["synth", "--out", p(&raw), "--subjects", "1", "--trials-per-class", "5", "--snr-db", "20", "--seed", "3"]);
        ok(&["preprocess", "--in", p(&raw), "--out", p(&pre)]);
        (dir, pre)
    })
}

fn train_args<'a>(data: &'a Path, out: &'a Path, loss: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--data", p(data), "--out", p(out), "--arch", "eegnet", "--loss", loss, "--max-epochs", "1",
        "--seed", "5",
    ]
}

#[test]
fn synth_writes_one_trial_per_class_and_repetition() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = ok(&["synth", "--out", p(&out), "--subjects", "1", "--trials-per-class", "4", "--seed", "1"]);
    assert!(stdout(&o).contains("104 trials"), "{}", stdout(&o));
    let m = manifest(&out);
    assert_eq!(m["subjects"][0]["events"].as_array().unwrap().len(), 104);
    assert_eq!(m["layout"], "continuous");
}

#[test]
fn synth_is_byte_identical_for_the_same_seed_and_needs_force_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |o: &Path| vec!["synth".to_string(), "--out".into(), p(o).into(), "--subjects".into(), "1".into(), "--trials-per-class".into(), "2".into(), "--seed".into(), "9".into()];
    let run = |o: &Path, extra: &[&str]| {
        let mut v = args(o);
        v.extend(extra.iter().map(|s| s.to_string()));
        airscl(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(code(&run(&a, &[])), 0);
    assert_eq!(code(&run(&b, &[])), 0);
    for f in ["manifest.json", "sub01.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(code(&run(&a, &[])), 2);
    assert_eq!(code(&run(&a, &["--force"])), 0);
}

#[test]
fn synth_into_unwritable_path_fails_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = airscl(&["synth", "--out", p(&blocker.join("store")), "--subjects", "1", "--trials-per-class", "1"]);
    assert_ne!(code(&out), 0);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn preprocess_emits_both_stores_or_one_with_skip_ica() {
    let (_, pre) = shared();
    let eeg = manifest(&pre.join("preprocessed_eeg"));
    let ica = manifest(&pre.join("ica_components"));
    assert_eq!(eeg["feature_kind"], "preprocessed_eeg");
    assert_eq!(ica["feature_kind"], "ica_components");
    assert_eq!(ica["channel_labels"][0], "IC01");
    assert!(pre.join("ica_components/sub01.ica.json").is_file());

    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let only = dir.path().join("only");
    ok(&["synth", "--out", p(&raw), "--subjects", "1", "--trials-per-class", "1"]);
    ok(&["preprocess", "--in", p(&raw), "--out", p(&only), "--skip-ica"]);
    assert!(only.join("preprocessed_eeg/manifest.json").is_file());
    assert!(!only.join("ica_components").exists());
}

#[test]
fn preprocess_rejects_inverted_band_and_names_bad_manifest_fields() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    ok(&["synth", "--out", p(&raw), "--subjects", "1", "--trials-per-class", "1"]);
    let o = airscl(&["preprocess", "--in", p(&raw), "--out", p(&dir.path().join("x")), "--low", "50", "--high", "45"]);
    assert_eq!(code(&o), 2);

    let text = fs::read_to_string(raw.join("manifest.json")).unwrap();
    fs::write(raw.join("manifest.json"), text.replace("\"fs\": 500.0", "\"fs\": -1.0")).unwrap();
    let o = airscl(&["preprocess", "--in", p(&raw), "--out", p(&dir.path().join("y"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("`fs`"), "{}", stderr(&o));
}

#[test]
fn scl_training_reports_every_fold_and_is_reproducible() {
    let (_, pre) = shared();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&train_args(pre, &a, "scl"));
    ok(&train_args(pre, &b, "scl"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    let cell = report["cells"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["key"]["loss_mode"] == "scl" && c["key"]["arch"] == "eegnet" && c["key"]["feature_kind"] == "preprocessed_eeg")
        .unwrap();
    let folds = cell["subjects"][0]["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    assert!(folds.iter().all(|f| f.as_f64().is_some_and(|v| (0.0..=1.0).contains(&v))));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());

    for f in ["config.json", "report.txt", "checkpoints/sub01_fold0.json", "checkpoints/sub01_fold0.bin", "folds/sub01_fold4.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(a.join("metrics/sub01_fold0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("stage,epoch,train_loss,val_metric"));
    assert_eq!(lines.count(), 2, "one epoch per stage");
    let state: serde_json::Value = serde_json::from_slice(&fs::read(a.join("state.json")).unwrap()).unwrap();
    assert_eq!(state["status"], "complete");
}

#[test]
fn interrupted_run_resumes_to_the_same_report() {
    let (_, pre) = shared();
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = train_args(pre, &run, "ce");
    args.extend(["--folds", "2", "--jobs", "2"]);
    ok(&args);
    let report = fs::read(run.join("report.json")).unwrap();
    // Simulate an interruption after the first unit.
    fs::remove_file(run.join("folds/sub01_fold1.json")).unwrap();
    fs::remove_file(run.join("report.json")).unwrap();
    fs::write(run.join("state.json"), br#"{"status":"running","units_total":2,"units_done":1}"#).unwrap();
    ok(&args);
    assert_eq!(fs::read(run.join("report.json")).unwrap(), report);

    args.extend(["--patience", "3"]);
    assert_eq!(code(&airscl(&args)), 2, "changed config must not resume silently");
}

#[test]
fn training_usage_errors_exit_with_two() {
    let (_, pre) = shared();
    let dir = tempfile::tempdir().unwrap();
    let r1 = dir.path().join("r1");
    let mut args = train_args(pre, &r1, "scl");
    args.extend(["--batch", "1"]);
    let o = airscl(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let eeg_only = pre.join("preprocessed_eeg");
    let r2 = dir.path().join("r2");
    let mut args = train_args(&eeg_only, &r2, "ce");
    args.extend(["--features", "ica"]);
    assert_eq!(code(&airscl(&args)), 2);
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let (_, pre) = shared();
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("run.ini");
    fs::write(&ini, "[pipeline]\nfolds = 2\npatience = 7\nmax_epochs = 1\n\n[contrastive]\ntau = 0.2\n").unwrap();
    let run = dir.path().join("run");
    ok(&["--config", p(&ini), "train", "--data", p(pre), "--out", p(&run), "--patience", "4", "--batch", "16"]);
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["folds"], 2);
    assert_eq!(cfg["train"]["patience"], 4);
    assert_eq!(cfg["train"]["tau"], 0.2);

    fs::write(&ini, "[nonsense]\nx = 1\n").unwrap();
    assert_eq!(code(&airscl(&["--config", p(&ini), "train", "--data", p(pre), "--out", p(&run)])), 2);
}

#[test]
fn report_merges_runs_and_rejects_duplicate_cells() {
    let (_, pre) = shared();
    let dir = tempfile::tempdir().unwrap();
    let (ce, scl) = (dir.path().join("ce"), dir.path().join("scl"));
    let mut a = train_args(pre, &ce, "ce");
    a.extend(["--folds", "2"]);
    ok(&a);
    let mut b = train_args(pre, &scl, "scl");
    b.extend(["--folds", "2"]);
    ok(&b);

    let one = stdout(&ok(&["report", "--runs", p(&ce)]));
    assert!(one.contains("Average"));
    let missing: usize = one
        .lines()
        .filter_map(|l| l.strip_prefix("incomplete: "))
        .map(|l| l.split(", ").count())
        .sum();
    assert_eq!(missing, 7);

    let both = stdout(&ok(&["report", "--runs", p(&ce), p(&scl), "--format", "json"]));
    let merged: serde_json::Value = serde_json::from_str(&both).unwrap();
    let complete = merged["cells"].as_array().unwrap().iter().filter(|c| c["complete"] == true).count();
    assert_eq!(complete, 2);

    let dup = airscl(&["report", "--runs", p(&ce), p(&ce)]);
    assert_eq!(code(&dup), 1);
    assert_eq!(stderr(&dup).matches(p(&ce)).count(), 2, "{}", stderr(&dup));
}
