#[path = "../../core/tests/common/idx.rs"]
mod idx;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bm_cli::commands::uuc_stats;
use bm_core::model::{mlp_spec, Model};
use bm_core::tensor::{Activation, Tensor};
use serde_json::{json, Value};

fn bm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bm"))
        .args(args)
        .env_remove("BM_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn points2d() -> Value {
    json!({
        "description": "cli test",
        "dataset": {"kind": "points2d"},
        "noise": {"n_u": 1, "n_b": 1},
        "model": {"kind": "mlp", "widths": [2, 8, 8, 2], "activation": "tanh"},
        "train": {
            "lambda": 10,
            "epochs": 4,
            "optimizer": {"kind": "sgd", "lr": 0.01, "momentum": 0.9, "weight_decay": 0.0005},
            "checkpoint_every": 2
        },
        "attacks": [
            {"name": "fgsm", "attack": {"kind": "fgsm"}, "epsilons": [0, 0.1, 0.5]},
            {"name": "pgd", "attack": {"kind": "pgd", "pgd_steps": 5}, "epsilons": [0.1], "limit": 50}
        ],
        "rho_adv": {"limit": 50},
        "surface": {"x_range": [-3, 3], "y_range": [-2, 2], "resolution": [3, 3]},
        "seeds": [0, 1]
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    bm(&args)
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_sha256="), "{}", p.display());
    lines.skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn reruns_reproduce_every_file_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.json", &points2d());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(run("all", &cfg, &a, &[]));
    ok(run("all", &cfg, &b, &["--threads", "1"]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }
    for must in [
        "data/seed-0/labeled.bmck",
        "data/seed-0/unlabeled.bmck",
        "runs/seed-1/model.bmck",
        "runs/seed-1/log.jsonl",
        "reports/seed-0/evaluation.json",
        "reports/seed-0/fgsm.csv",
        "reports/fgsm-aggregate.csv",
        "reports/pgd-aggregate.csv",
        "surface/seed-0.svg",
        "report.json",
    ] {
        assert!(ta.contains_key(Path::new(must)), "missing {must}");
    }
    ok(run("attack", &cfg, &a, &[]));
    ok(run("surface", &cfg, &a, &[]));
    ok(run("report", &cfg, &a, &[]));
    let again = tree(&a);
    for (k, v) in &ta {
        assert!(v == &again[k], "{} changed on rerun", k.display());
    }
}

#[test]
fn every_csv_carries_the_config_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.json", &points2d());
    let out = dir.path().join("o");
    ok(run("all", &cfg, &out, &["--seed", "3"]));
    let files = tree(&out);
    let csvs: Vec<_> = files.keys().filter(|k| k.extension().is_some_and(|e| e == "csv")).collect();
    assert!(csvs.len() >= 5);
    let head = |k: &Path| String::from_utf8(files[k].clone()).unwrap().lines().next().unwrap().to_string();
    let first = head(csvs[0]);
    let hash = first.split_whitespace().nth(1).unwrap().to_string();
    assert!(hash.starts_with("config_sha256=") && hash.len() == 14 + 64, "{first}");
    for k in csvs {
        let h = head(k);
        assert!(h.starts_with(&format!("# {hash} ")), "{}: {h}", k.display());
        assert!(h.ends_with("seed=3"), "{}: {h}", k.display());
    }
    let svg = String::from_utf8(files[Path::new("surface/seed-3.svg")].clone()).unwrap();
    assert!(svg.contains(&hash));
}

#[test]
fn surface_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.json", &points2d());
    let out = dir.path().join("o");
    ok(run("gen", &cfg, &out, &["--seed", "0"]));
    ok(run("train", &cfg, &out, &["--seed", "0"]));
    ok(run("surface", &cfg, &out, &["--seed", "0"]));
    let rows = csv_rows(&out.join("surface/seed-0.csv"));
    assert_eq!(rows.len(), 9);
    for r in &rows {
        let p: f64 = r.last().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn sigma_sweep_emits_one_row_per_multiplier() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = points2d();
    v["train"]["epochs"] = json!(1);
    v["sigma_sweep"] = json!({"multipliers": [0.1, 0.5, 1, 1.5, 2, 3]});
    let cfg = write_config(dir.path(), "p.json", &v);
    let out = dir.path().join("o");
    ok(run("sigma-sweep", &cfg, &out, &["--seed", "0"]));
    let rows = csv_rows(&out.join("sigma_sweep/seed-0.csv"));
    assert_eq!(rows.len(), 6);
    let s: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert!((s[2] / s[0] - 10.0).abs() < 1e-9);
}

#[test]
fn lambda_sweep_emits_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = points2d();
    v["train"]["epochs"] = json!(2);
    v["lambda_sweep"] = json!({"lambdas": [0, 10, 1000]});
    let cfg = write_config(dir.path(), "p.json", &v);
    let out = dir.path().join("o");
    ok(run("lambda-sweep", &cfg, &out, &["--seed", "0"]));
    let rows = csv_rows(&out.join("lambda_sweep/seed-0.csv"));
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let acc: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn single_seed_aggregates_have_zero_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.json", &points2d());
    let out = dir.path().join("o");
    ok(run("all", &cfg, &out, &["--seed", "5"]));
    let rows = csv_rows(&out.join("reports/fgsm-aggregate.csv"));
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[3], "1");
    }
}

#[test]
fn without_unlabeled_points_no_cache_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = points2d();
    v["noise"] = json!({"n_u": 0, "n_b": 1, "sigma_u": 0.9});
    let cfg = write_config(dir.path(), "p.json", &v);
    let out = dir.path().join("o");
    ok(run("gen", &cfg, &out, &["--seed", "0"]));
    assert!(!out.join("data/seed-0/unlabeled.bmck").exists());
    let (m, _) = bm_core::io::read(&out.join("data/seed-0/labeled.bmck")).unwrap();
    assert_eq!(m["sigma_u"].as_f64(), Some(0.9));
    assert!((m["sigma_b"].as_f64().unwrap() - 0.09).abs() < 1e-15);
    ok(run("train", &cfg, &out, &["--seed", "0"]));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let help = bm(&["--help"]);
    assert_eq!(code(&help), 0);
    assert_eq!(code(&bm(&["frobnicate"])), 1);
    assert_eq!(code(&bm(&["gen"])), 1);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run("gen", &bad, &out, &[])), 1);

    let mut v = points2d();
    v["surprise"] = json!(1);
    assert_eq!(code(&run("gen", &write_config(dir.path(), "u.json", &v), &out, &[])), 1);

    let mut v = points2d();
    v["train"]["lambda"] = json!(-1);
    assert_eq!(code(&run("gen", &write_config(dir.path(), "l.json", &v), &out, &[])), 1);

    let mut v = points2d();
    v["dataset"] = json!({
        "kind": "mnist",
        "train_images": "nope-images", "train_labels": "nope-labels",
        "test_images": "nope-images", "test_labels": "nope-labels"
    });
    v["model"] = json!({"kind": "lenet", "activation": "relu"});
    assert_eq!(code(&run("gen", &write_config(dir.path(), "m.json", &v), &out, &[])), 1);

    let missing = dir.path().join("absent.json");
    assert_eq!(code(&run("gen", &missing, &out, &[])), 3);

    let good = write_config(dir.path(), "p.json", &points2d());
    assert_eq!(code(&run("train", &good, &dir.path().join("empty"), &[])), 3);
    assert_eq!(code(&run("attack", &good, &dir.path().join("empty"), &[])), 3);

    let mut v = points2d();
    v["train"]["optimizer"]["lr"] = json!(f64::MAX);
    let huge = write_config(dir.path(), "h.json", &v);
    let o2 = dir.path().join("o2");
    ok(run("gen", &huge, &o2, &["--seed", "0"]));
    let o = run("train", &huge, &o2, &["--seed", "0"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(code(&run("gen", &good, &out, &["--threads", "0"])), 1);
}

#[test]
fn stale_caches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "p.json", &points2d());
    ok(run("gen", &cfg, &out, &["--seed", "0"]));
    let mut v = points2d();
    v["noise"]["n_b"] = json!(3);
    let changed = write_config(dir.path(), "q.json", &v);
    let o = run("train", &changed, &out, &["--seed", "0"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn mnist_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    idx::write_digits(dir.path(), "train", 100, 1);
    idx::write_digits(dir.path(), "test", 30, 2);
    idx::write_digits(dir.path(), "foreign", 20, 3);
    let v = json!({
        "dataset": {
            "kind": "mnist",
            "train_images": "train-images-idx3-ubyte",
            "train_labels": "train-labels-idx1-ubyte",
            "test_images": "test-images-idx3-ubyte",
            "test_labels": "test-labels-idx1-ubyte",
            "subset_per_class": 5,
            "test_limit": 20
        },
        "noise": {"n_u": 1, "n_b": 1, "sigma_u": 0.126, "sigma_b": 0.0126},
        "model": {"kind": "lenet", "activation": "relu"},
        "train": {"lambda": 100, "epochs": 1, "optimizer": {"kind": "adam", "lr": 0.001}},
        "attacks": [{"name": "fgsm", "attack": {"kind": "fgsm"}, "epsilons": [0, 0.1]}],
        "rho_adv": {"limit": 10},
        "uuc": {"images": "foreign-images-idx3-ubyte"},
        "seeds": [0]
    });
    let cfg = write_config(dir.path(), "m.json", &v);
    ok(run("all", &cfg, &dir.path().join("o"), &[]));
    let rows = csv_rows(&dir.path().join("o/uuc/seed-0.csv"));
    assert_eq!(rows.len(), 10);
    let summary = csv_rows(&dir.path().join("o/uuc/summary.csv"));
    assert_eq!(summary.len(), 1);
    let ev: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/reports/seed-0/evaluation.json")).unwrap()).unwrap();
    assert_eq!(ev["rho_adv"]["points"], json!(10));
}

#[test]
fn uniform_models_have_flat_class_means() {
    let mut m = Model::new(mlp_spec(&[4, 5], Activation::Tanh).unwrap(), 0).unwrap();
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64).collect()).unwrap();
    let s = uuc_stats(&m, &x).unwrap();
    assert!(s.class_mean.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(s.class_std.iter().all(|&v| v.abs() < 1e-15));
    assert!(s.std_of_means.abs() < 1e-15);
}
