use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn probmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probmix")).args(args).output().expect("spawn probmix")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn fixture() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/uci_synthetic.csv")
        .canonicalize()
        .unwrap()
        .display()
        .to_string()
}

fn small_csv_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        &format!(
            r#"{{
  "dataset": {{ "kind": "csv", "path": "{}", "targets": ["y"] }},
  "model": {{ "hidden": [8] }},
  "regularizer": {{ "method": "probmix" }},
  "training": {{ "optimizer": {{ "kind": "adam" }}, "epochs": 5, "seeds": [0, 1] }},
  "sweep": {{ "methods": ["erm", "mix", "m-probmix"] }}
}}"#,
            fixture()
        ),
    )
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes_without_config() {
    let out = probmix(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&probmix(&["train", "--config", arg(&missing), "--out", arg(&out)])), 1);

    let bad_key = write_config(dir.path(), r#"{"dataset": {"kind": "toy-regression"}, "colour": 3}"#);
    assert_eq!(code(&probmix(&["train", "--config", arg(&bad_key), "--out", arg(&out)])), 1);

    let ok = write_config(dir.path(), r#"{"dataset": {"kind": "toy-regression"}}"#);
    let neg = probmix(&["train", "--config", arg(&ok), "--set", "regularizer.alpha=-1", "--out", arg(&out)]);
    assert_eq!(code(&neg), 1);
    let method = probmix(&["train", "--config", arg(&ok), "--set", "regularizer.method=cutmix", "--out", arg(&out)]);
    assert_eq!(code(&method), 1);
    assert_eq!(code(&probmix(&["train", "--config", arg(&ok)])), 1);
    assert_eq!(code(&probmix(&["frobnicate"])), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_csv_config(dir.path());
    let out = dir.path().join("empty");
    let eval = probmix(&["eval", "--config", arg(&cfg), "--out", arg(&out)]);
    assert_eq!(code(&eval), 2);
    assert!(String::from_utf8_lossy(&eval.stderr).contains("checkpoint"));

    let gone = write_config(
        dir.path(),
        r#"{"dataset": {"kind": "csv", "path": "nowhere.csv", "targets": ["y"]}, "training": {"epochs": 1}}"#,
    );
    assert_eq!(code(&probmix(&["train", "--config", arg(&gone), "--out", arg(&out)])), 2);
}

#[test]
fn sweep_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_csv_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = probmix(&["sweep", "--config", arg(&cfg), "--out", arg(out)]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    let first = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(first, fs::read(b.join("results.csv")).unwrap());
    assert_eq!(fs::read(a.join("summary.csv")).unwrap(), fs::read(b.join("summary.csv")).unwrap());

    let again = probmix(&["sweep", "--config", arg(&cfg), "--out", arg(&a)]);
    assert!(String::from_utf8_lossy(&again.stdout).starts_with("0 runs completed, 6 skipped"));
    assert_eq!(first, fs::read(a.join("results.csv")).unwrap());

    // A partial results file is completed without retraining finished runs.
    let text = String::from_utf8(first.clone()).unwrap();
    let keep: Vec<&str> = text.lines().filter(|l| !l.starts_with("m-probmix")).collect();
    fs::write(b.join("results.csv"), keep.join("\n") + "\n").unwrap();
    let resumed = probmix(&["sweep", "--config", arg(&cfg), "--out", arg(&b)]);
    assert!(String::from_utf8_lossy(&resumed.stdout).starts_with("2 runs completed, 4 skipped"));
    assert_eq!(first, fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn generate_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset": {"kind": "toy-regression", "n_train": 30, "n_test": 20},
            "model": {"hidden": [8]},
            "regularizer": {"method": "loc-probmix"},
            "training": {"epochs": 3},
            "plots": {"points": 11}}"#,
    );
    let out = dir.path().join("out");
    let o = arg(&out);
    let gen = probmix(&["generate", "--config", arg(&cfg), "--out", o]);
    assert_eq!(code(&gen), 0);
    let train_csv = fs::read_to_string(out.join("data/toy-regression_seed0_train.csv")).unwrap();
    assert_eq!(train_csv.lines().count(), 31);

    assert_eq!(code(&probmix(&["train", "--config", arg(&cfg), "--out", o])), 0);
    assert_eq!(code(&probmix(&["eval", "--config", arg(&cfg), "--out", o])), 0);
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(eval.lines().skip(1).all(|l| l.starts_with("loc-probmix_")));

    let plots = probmix(&["export-plots", "--config", arg(&cfg), "--out", o]);
    assert_eq!(code(&plots), 0);
    let path = String::from_utf8(plots.stdout).unwrap();
    let band = fs::read_to_string(path.trim()).unwrap();
    let mut lines = band.lines();
    assert_eq!(lines.next(), Some("x,mean,band_lower,band_upper"));
    assert_eq!(lines.count(), 11);
}
