use std::fs;
use std::path::Path;
use std::process::Command;

use rostlab_cli::{read_manifest, replay, summarize};

fn rostlab(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rostlab")).args(args).current_dir(dir).output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

const RPC_STABILITY: &str = r#"
seed = 11
[ensemble]
source = "rpc"
x = [0.5]
q = [0.0, 1.0]
M = 200
[budget]
ensemble = 40
fields = 10
tuples = 500
[params]
lambda = [0.5]
"#;

#[test]
fn stability_run_writes_nine_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", RPC_STABILITY);
    let (code, log) = rostlab(&["stability", "--config", &cfg, "--out", "run", "--threads", "2"], tmp.path());
    assert_eq!(code, 0, "{log}");
    let csv = fs::read_to_string(tmp.path().join("run/stability.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    let m = read_manifest(&tmp.path().join("run")).unwrap();
    assert!(m.passed && !m.partial);
    assert_eq!(m.outputs.len(), 1);
}

#[test]
fn free_energy_at_zero_temperature_factor_is_log2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "f.toml",
        "seed = 3\n[model]\nmodel = \"sk\"\nn = 8\nbeta = [[2, 0.7]]\ntemperature = 0.0\n[budget]\ndisorder = 10\n",
    );
    let (code, log) = rostlab(&["free-energy", "--config", &cfg, "--out", "fe"], tmp.path());
    assert_eq!(code, 0, "{log}");
    let csv = fs::read_to_string(tmp.path().join("fe/free_energy.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    let cols: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(cols[4].parse::<f64>().unwrap(), std::f64::consts::LN_2);
    assert_eq!(cols[5].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn negative_budget_is_a_config_error_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &RPC_STABILITY.replace("ensemble = 40", "ensemble = -4"));
    let (code, log) = rostlab(&["stability", "--config", &cfg, "--out", "bad"], tmp.path());
    assert_eq!(code, 2);
    assert!(log.contains("ensemble"), "{log}");
    assert!(!tmp.path().join("bad").exists());
}

#[test]
fn missing_seed_and_kind_mismatch_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "noseed.toml", &RPC_STABILITY.replace("seed = 11", ""));
    assert_eq!(rostlab(&["stability", "--config", &cfg, "--out", "x"], tmp.path()).0, 2);
    assert_eq!(rostlab(&["stability", "--config", &cfg, "--seed", "4", "--out", "x"], tmp.path()).0, 0);
    let cfg = write(tmp.path(), "kind.toml", &format!("kind = \"gg\"\n{RPC_STABILITY}"));
    assert_eq!(rostlab(&["stability", "--config", &cfg, "--out", "y"], tmp.path()).0, 2);
}

#[test]
fn failing_assertion_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "u.toml",
        "seed = 5\n[ensemble]\nsource = \"rem\"\nx1 = 0.4\nx2 = 0.6\nm = 20\n[budget]\nensemble = 4\ntriples = 200\n[params]\nexpect_ultrametric = true\n",
    );
    assert_eq!(rostlab(&["ultrametricity", "--config", &cfg, "--out", "u"], tmp.path()).0, 1);
}

#[test]
fn replay_is_identical_and_detects_seed_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", RPC_STABILITY);
    assert_eq!(rostlab(&["stability", "--config", &cfg, "--out", "r", "--threads", "1"], tmp.path()).0, 0);
    let manifest = tmp.path().join("r/manifest.json");
    let m = read_manifest(&manifest).unwrap();
    for threads in [1, 3] {
        let r = replay(&m, None, Some(threads)).unwrap();
        assert!(r.identical, "{:?}", r.mismatches);
    }
    let r = replay(&m, Some(12), None).unwrap();
    assert_eq!(r.mismatches.len(), 1);
    let (code, log) = rostlab(&["replay", manifest.to_str().unwrap(), "--seed", "99"], tmp.path());
    assert_eq!(code, 1);
    assert!(log.contains("digest mismatch stability.csv"), "{log}");
}

#[test]
fn summarize_groups_by_kind_and_fits_trends() {
    let tmp = tempfile::tempdir().unwrap();
    let scan = "seed = 2\n[model]\nmodel = \"sk\"\nn = 6\nbeta = [[2, 0.4]]\n[ensemble]\nsource = \"gibbs\"\n\
                [budget]\nensemble = 10\nfields = 4\ntuples = 200\n[params]\nlambda = [0.5]\nn_list = [6, 8, 10, 12]\n";
    let cfg = write(tmp.path(), "scan.toml", scan);
    assert_eq!(rostlab(&["stability", "--config", &cfg, "--out", "runs/scan"], tmp.path()).0, 0);
    let cfg = write(tmp.path(), "fe.toml", "seed = 1\n[model]\nn = 6\nbeta = [[2, 0.5]]\n[budget]\ndisorder = 4\n");
    assert_eq!(rostlab(&["free-energy", "--config", &cfg, "--out", "runs/fe"], tmp.path()).0, 0);

    let s = summarize(&tmp.path().join("runs")).unwrap();
    let kinds: Vec<&str> = s.iter().map(|k| k.kind.as_str()).collect();
    assert_eq!(kinds, ["free-energy", "stability"]);
    let stab = &s[1];
    assert_eq!(stab.runs[0].metrics.len(), 8);
    assert_eq!(stab.trends.len(), 2);
    assert!(stab.trends.iter().all(|t| t.log_slope.is_some()));
    let table = fs::read_to_string(tmp.path().join("runs/summary_stability.csv")).unwrap();
    assert_eq!(table.lines().count(), 9);
    assert!(tmp.path().join("runs/summary.json").exists());
    assert!(summarize(&tmp.path().join("runs/fe")).unwrap()[0].trends.is_empty());
}

#[test]
fn summarize_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(summarize(tmp.path()).is_err());
    assert_eq!(rostlab(&["summarize", "."], tmp.path()).0, 2);
}
