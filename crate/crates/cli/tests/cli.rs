use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bnnps_cli::config::{Benchmark, ExperimentConfig};
use serde_json::Value;

fn bnnps(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnnps"))
        .args(args)
        .env("BNNPS_OUT_ROOT", root.join("runs"))
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = bnnps(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run_dirs(root: &Path, command: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().ends_with(command))
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// A toy config small enough to train in a second.
fn tiny_config(root: &Path, benchmark: &str) -> PathBuf {
    let mut cfg = ExperimentConfig::defaults(benchmark.parse().unwrap());
    cfg.data.n_train = 120;
    cfg.data.n_test = 60;
    cfg.model.hidden = vec![8];
    cfg.model.epochs = 3;
    cfg.model.samples = 4;
    cfg.model.batch_size = 40;
    cfg.policy.epochs = 2;
    cfg.policy.hidden = vec![4];
    cfg.eval.samples = 10;
    cfg.eval.episodes = 2;
    cfg.eval.steps = 20;
    let path = root.join(format!("{benchmark}.conf"));
    fs::write(&path, cfg.to_text()).unwrap();
    path
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    for b in ["wet-chicken", "toy-bimodal", "toy-heteroskedastic"] {
        ok(r, &["gen-data", b, "40", "--seed", "9", "--out", "a.csv"]);
        ok(r, &["gen-data", b, "40", "--seed", "9", "--out", "b.csv"]);
        ok(r, &["gen-data", b, "40", "--seed", "10", "--out", "c.csv"]);
        let (a, b2, c) = (fs::read(r.join("a.csv")).unwrap(), fs::read(r.join("b.csv")).unwrap(), fs::read(r.join("c.csv")).unwrap());
        assert_eq!(a, b2, "{b}");
        assert_ne!(a, c, "{b}");
    }
}

#[test]
fn print_config_round_trips() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    for b in Benchmark::ALL {
        let text = ok(r, &["print-config", "--benchmark", b.name()]);
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), ExperimentConfig::defaults(b));
        fs::write(r.join("c.conf"), &text).unwrap();
        assert_eq!(ok(r, &["print-config", "--config", "c.conf"]), text);
    }
    let vb = ok(r, &["print-config", "--benchmark", "toy-bimodal", "--method", "vb", "--seed", "4"]);
    let cfg = ExperimentConfig::parse(&vb).unwrap();
    assert_eq!(cfg.method_label(), "vb");
    assert_eq!(cfg.seed, 4);
}

#[test]
fn manifest_is_written_with_digests() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(r, &["gen-data", "toy-bimodal", "30", "--seed", "2"]);
    let dirs = run_dirs(r, "gen-data");
    assert_eq!(dirs.len(), 1);
    let name = dirs[0].file_name().unwrap().to_string_lossy().to_string();
    assert!(name.contains("-seed2-gen-data"), "{name}");
    let m = manifest(&dirs[0]);
    assert_eq!(m["status"], "complete");
    assert_eq!(m["seed"], 2);
    assert_eq!(m["args"]["n"], 30);
    let data = dirs[0].join("data.csv");
    let digest = bnnps_cli::run::sha256_file(&data).unwrap();
    assert_eq!(m["outputs"][data.display().to_string()], digest.as_str());
    let meta = fs::read_to_string(dirs[0].join("data.csv.meta")).unwrap();
    assert!(meta.contains("seed=2\n") && meta.contains("n=30\n") && meta.contains("columns=x,y\n"), "{meta}");
}

#[test]
fn vb_is_recorded_as_tiny_alpha() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let conf = tiny_config(r, "toy-heteroskedastic");
    ok(r, &["train-model", "--config", conf.to_str().unwrap(), "--method", "vb"]);
    let dir = &run_dirs(r, "train-model")[0];
    let m = manifest(dir);
    assert_eq!(m["args"]["alpha"], 1e-6);
    assert_eq!(m["args"]["method"], "vb");
    assert!(dir.join("model.ckpt").is_file() && dir.join("loss_trace.csv").is_file());
}

#[test]
fn model_and_policy_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let conf = tiny_config(r, "wet-chicken");
    let conf = conf.to_str().unwrap();
    ok(r, &["gen-data", "wet-chicken", "60", "--seed", "5", "--out", "test.csv"]);
    ok(r, &["train-model", "--config", conf, "--out", "m.ckpt"]);
    ok(r, &["train-model", "--config", conf, "--out", "m2.ckpt"]);
    assert_eq!(fs::read(r.join("m.ckpt")).unwrap(), fs::read(r.join("m2.ckpt")).unwrap());

    let metrics = ok(r, &["eval-model", "--model", "m.ckpt", "--data", "test.csv", "--samples", "5"]);
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "method,seed,mse,ll,mse_y,ll_y");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "alpha=0.5");
    assert!(row[2..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));

    let dump = ok(
        r,
        &["predictive-dump", "--model", "m.ckpt", "--state", "2.5,4", "--action", "0,0", "--samples", "50", "--out", "d.csv"],
    );
    assert!(dump.contains("d.csv"));
    let text = fs::read_to_string(r.join("d.csv")).unwrap();
    assert!(text.starts_with("model_sample,truth_sample\n"));
    assert_eq!(text.lines().count(), 51);

    ok(r, &["train-policy", "--config", conf, "--model", "m.ckpt", "--out", "p.ckpt"]);
    let ev = ok(r, &["eval-policy", "--policy", "p.ckpt", "--episodes", "2", "--steps", "30", "--seed", "3"]);
    let mut lines = ev.lines();
    assert_eq!(lines.next().unwrap(), "method,seed,mean_reward,stderr");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[..2], ["alpha=0.5", "3"]);
    let reward: f64 = row[2].parse().unwrap();
    assert!((-5.0..=0.0).contains(&reward), "{reward}");
    assert_eq!(ev, ok(r, &["eval-policy", "--policy", "p.ckpt", "--episodes", "2", "--steps", "30", "--seed", "3"]));

    let m = manifest(&run_dirs(r, "train-policy")[0]);
    assert_eq!(m["args"]["horizon"], 5);
    assert!(m["inputs"]["m.ckpt"].is_string());
}

#[test]
fn exit_codes_name_the_category() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let code = |args: &[&str]| {
        let out = bnnps(r, args);
        (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).to_string())
    };

    let (c, _) = code(&["no-such-command"]);
    assert_eq!(c, 2);
    let (c, e) = code(&["print-config", "--config", "missing.conf"]);
    assert_eq!(c, 4);
    assert!(e.starts_with("error[io]:"), "{e}");

    fs::write(r.join("bad.conf"), "[model]\nalpha = 0.5\nalpha = 1\n").unwrap();
    let (c, e) = code(&["print-config", "--config", "bad.conf"]);
    assert_eq!(c, 3);
    assert!(e.starts_with("error[config]:") && e.contains("line 3"), "{e}");

    fs::write(r.join("bad.csv"), "x,y\n1,oops\n").unwrap();
    let conf = tiny_config(r, "toy-bimodal");
    let (c, e) = code(&["train-model", "--config", conf.to_str().unwrap(), "--data", "bad.csv"]);
    assert_eq!(c, 5);
    assert!(e.starts_with("error[data]:"), "{e}");

    let (c, e) = code(&["repro-tables", "--config-dir", r.join("nowhere").to_str().unwrap()]);
    assert_eq!(c, 1);
    assert!(e.contains("missing"), "{e}");
}

#[test]
fn workers_do_not_change_results() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let dir = r.join("confs");
    fs::create_dir(&dir).unwrap();
    for b in Benchmark::ALL {
        let p = tiny_config(r, b.name());
        fs::rename(p, dir.join(format!("{}.conf", b.name()))).unwrap();
    }
    let d = dir.to_str().unwrap();
    ok(r, &["repro-tables", "--seeds", "2", "--config-dir", d, "--workers", "1"]);
    ok(r, &["repro-tables", "--seeds", "2", "--config-dir", d, "--workers", "3"]);
    let dirs = run_dirs(r, "repro-tables");
    assert_eq!(dirs.len(), 2);
    for name in ["table1_wetchicken.csv", "table2_wetchicken.csv", "table3.csv", "table4.csv", "runs.csv"] {
        let a = fs::read_to_string(dirs[0].join(name)).unwrap();
        assert_eq!(a, fs::read_to_string(dirs[1].join(name)).unwrap(), "{name}");
    }
    let jobs = fs::read_dir(&dirs[0]).unwrap().filter(|e| e.as_ref().unwrap().path().join("manifest.json").is_file()).count();
    assert_eq!(jobs, 2 * (4 + 3 + 3));
    let t1 = fs::read_to_string(dirs[0].join("table1_wetchicken.csv")).unwrap();
    assert!(t1.starts_with("method,mean_reward,stderr,runs\nmlp,"), "{t1}");
    assert_eq!(fs::read_to_string(dirs[0].join("table3.csv")).unwrap().lines().count(), 4);
}
