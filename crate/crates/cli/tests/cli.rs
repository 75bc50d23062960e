use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mia(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mia"))
        .args(args)
        .current_dir(cwd)
        .env("MIA_THREADS", "1")
        .output()
        .expect("binary runs")
}

const CONFIG: &str = r#"
setting = "adaptive"
attacks = ["loss", "lira_adaptive"]
seeds = [3]
n_shadows = 4
out_dir = "out"

[data]
kind = "synthetic"
num_classes = 3
dim = 4
per_class_count = 20
class_separation = 2.0
within_class_sigma = 1.0
seed = 1

[train]
hidden_sizes = [8]
epochs = 5
"#;

fn find(dir: &Path, name: &str) -> Option<std::path::PathBuf> {
    for e in fs::read_dir(dir).ok()? {
        let p = e.ok()?.path();
        if p.is_dir() {
            if let Some(f) = find(&p, name) {
                return Some(f);
            }
        } else if p.file_name().is_some_and(|n| n == name) {
            return Some(p);
        }
    }
    None
}

#[test]
fn run_inspect_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    let out = mia(&["run", "exp.toml", "--seed", "9"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("lira_adaptive"));

    let matrix = find(dir.path(), "shadows.mia").expect("matrix written");
    assert!(matrix.to_string_lossy().contains("/9/"));
    let out = mia(&["inspect", matrix.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("models     4") && text.contains("invariants ok"), "{text}");

    let csv = find(dir.path(), "loss.csv").unwrap();
    let roc = dir.path().join("roc.csv");
    let out = mia(&["metrics", csv.to_str().unwrap(), "--roc", roc.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["attack"], "loss");
    assert!(v["metrics"]["auc"].as_f64().unwrap() >= 0.0);
    assert!(roc.is_file());
}

#[test]
fn inspect_rejects_truncated_matrix() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    assert!(mia(&["run", "exp.toml"], dir.path()).status.success());
    let matrix = find(dir.path(), "shadows.mia").unwrap();
    let bytes = fs::read(&matrix).unwrap();
    let bad = dir.path().join("bad.mia");
    fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(!mia(&["inspect", bad.to_str().unwrap()], dir.path()).status.success());
}

const ORACLES: &str = r#"
[gibbs]
universes = 2
n = 4
sweeps = 30000
burn_in = 1000

[odds]
universes = 5
"#;

#[test]
fn oracles_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("o.toml"), ORACLES).unwrap();
    let out = mia(&["oracles", "o.toml", "--report", "rep.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tv="));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("rep.json")).unwrap()).unwrap();
    assert_eq!(rep["pass"], true);

    let out = mia(&["oracles", "o.toml", "--negative-control"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn bad_config_reports_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG.replace("seeds = [3]", "seeds = []")).unwrap();
    let out = mia(&["run", "exp.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mia"))
        .args(["oracles"])
        .env("MIA_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MIA_THREADS"));
}
