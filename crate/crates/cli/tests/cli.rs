use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pola(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pola")).args(args).output().expect("spawn pola")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"
seeds = [0, 1]
hidden_units = 3
workers = 1
methods = [
  { kind = "pretrained" },
  { kind = "online-sgd" },
  { kind = "pola-fs" },
  { kind = "pola-gd", k = 1 },
]

[pretrain]
num_samples = 60
epochs = 2
lr = 0.1
batch_size = 16

[dataset]
kind = "synthetic"
window_len = 6
horizon = 2

[dataset.synthetic]
seed = 4
segments = [
  { length = 120, mean = 0.0, coeffs = [0.6], noise_sd = 0.3 },
  { length = 120, mean = 2.0, coeffs = [0.3], noise_sd = 0.3 },
]
"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, CONFIG).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_then_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("res");
    let o = pola(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    assert!(out.join("manifest.json").exists());

    let o = pola(&["plotdata", out.to_str().unwrap(), "--smoothing", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(out.join("plots")).unwrap().count(), 4 * 3);
}

#[test]
fn manifest_rerun_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(pola(&["run", "-c", &cfg, "-o", a.to_str().unwrap()]).status.success());
    let m = a.join("manifest.json");
    let o = pola(&["run", "--manifest", m.to_str().unwrap(), "-o", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("summary.csv")).unwrap(), fs::read(b.join("summary.csv")).unwrap());
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let m = dir.path().join("m.json");
    let o = pola(&[
        "tune", "-c", &cfg, "--gamma", "0.01", "--q", "3", "--k", "2", "--eta", "0.5", "--b", "4", "-o",
        m.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&m).unwrap();
    assert!(text.contains("\"gamma\": 0.01"));
    assert!(text.contains("\"b\": 4"));
    assert!(text.contains("\"k\": 2"));
    assert!(text.contains("\"eta\": 0.5"));
    assert!(text.contains("\"q\": 3"));
    assert!(!text.contains("\"tuned_gamma\": true"));
}

#[test]
fn validate_data_reports_length() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sn.txt");
    let body: String = (0..10)
        .map(|i| format!("1749 {:02} 1749.{:03} {}.0 -1.0 -1 1\n", i + 1, i * 83, 50 + i))
        .collect();
    fs::write(&p, body).unwrap();
    let o = pola(&["validate-data", "--dataset", "sunspot", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("observations: 10"), "{text}");

    let o = pola(&["validate-data", "--dataset", "sunspot", "--strict", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("pola: error:"));
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let o = pola(&["validate-data", "--dataset", "power", "/nonexistent/household.txt"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("/nonexistent/household.txt"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = pola(&["run", "-c", &cfg, "--b", "1", "-o", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch size"));
}
