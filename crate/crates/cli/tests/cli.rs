use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-ens"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// The shipped example config shrunk to a few steps.
fn tiny_config(out: &Path) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny_pbe.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["train"]["steps"] = json!(5);
    v["train"]["eval_every"] = json!(0);
    v["data"]["train_size"] = json!(64);
    v["data"]["val_size"] = json!(32);
    v["data"]["test_size"] = json!(64);
    v["upstream"] = json!({ "train_size": 64, "steps": 3, "base_lr": 0.03 });
    v["repetitions"] = json!(1);
    v["output_dir"] = json!(out);
    v
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_json(dir.path(), "c.json", &tiny_config(&out));
    let o = run(&["--sequential", "run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("metric,mean,stderr,n\n"));
    for f in ["summary.csv", "config.json", "seed_0/report.json", "seed_0/model.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_config(&dir.path().join("out"));
    v["model"]["k"] = json!(9);
    let cfg = write_json(dir.path(), "bad.json", &v);
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    let mut v = tiny_config(&dir.path().join("out"));
    v["train"]["bogus"] = json!(1);
    let cfg = write_json(dir.path(), "unknown.json", &v);
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["run", "--config", "/nonexistent/c.json"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("label");
    for i in 0..48 {
        write!(csv, ",p{i}").unwrap();
    }
    csv.push('\n');
    for r in 0..40 {
        write!(csv, "{}", r % 2).unwrap();
        for i in 0..48 {
            let v = if i == 7 { f64::NAN } else { ((r * 48 + i) % 11) as f64 / 11.0 };
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    let data = dir.path().join("nan.csv");
    fs::write(&data, csv).unwrap();
    let mut v = tiny_config(&dir.path().join("out"));
    v["model"]["image_size"] = json!(4);
    v["model"]["patch_size"] = json!(2);
    v["model"]["classes"] = json!(2);
    v["upstream"] = Value::Null;
    v["data"] = json!({
        "kind": "csv", "classes": 2, "image_size": 4, "channels": 3,
        "train_size": 20, "val_size": 10, "test_size": 10, "path": data, "seed": 0
    });
    let cfg = write_json(dir.path(), "nan.json", &v);
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

fn table(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("t.csv");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn analyze_modes() {
    let dir = tempfile::tempdir().unwrap();
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/paper_results.csv");
    let grid = dir.path().join("grid.csv");
    fs::write(&grid, "label,metric,gflops,family,variant,k,m\na,0.60,1.0,S,pbe,1,1\nb,0.55,2.0,S,pbe,2,1\nc,0.50,2.5,S,pbe,1,2\n").unwrap();
    for (mode, input, file) in [
        ("gain_map", &grid, "gain_map.csv"),
        ("normalized_improvement", &shipped, "normalized_improvement.csv"),
        ("pareto", &shipped, "pareto.csv"),
    ] {
        let out = dir.path().join(mode);
        let o = run(&["analyze", "--mode", mode, "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(file).is_file(), "{mode}");
    }
    assert!(dir.path().join("pareto/pareto.svg").is_file());
    assert_eq!(fs::read_to_string(dir.path().join("gain_map/gain_map.csv")).unwrap().lines().count(), 4);

    let improvement = fs::read_to_string(dir.path().join("normalized_improvement/normalized_improvement.csv")).unwrap();
    let raw: Vec<f64> = improvement
        .lines()
        .filter(|l| l.contains("pbe"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    for (got, want) in raw.iter().zip([9.82, 9.53, 3.76, 5.38, 4.27]) {
        assert!((got - want).abs() <= 0.2, "{got} vs {want}");
    }
    assert_eq!(raw.len(), 5);

    let blank = table(dir.path(), "label,metric,gflops,family,variant,k,m\na,0.5,1.0,,,,\nb,0.4,2.0,,,,\n");
    let out = dir.path().join("blank");
    for mode in ["gain_map", "normalized_improvement"] {
        let o = run(&["analyze", "--mode", mode, "--input", blank.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{mode}");
    }

    let single = table(dir.path(), "label,metric,gflops\nonly,0.7,3.5\n");
    let o = run(&["analyze", "--mode", "pareto", "--input", single.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("pareto.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains("only"));

    let o = run(&["analyze", "--mode", "pareto", "--input", "/nonexistent.csv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flops_reports_saving_and_ensembles() {
    let o = run(&["flops", "--preset", "L/16", "--variant", "pbe", "--k", "2", "--m", "2", "--deferred"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    let saving: f64 = s
        .lines()
        .find_map(|l| l.strip_prefix("deferred-tiling saving: "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .unwrap();
    assert!((42.0..=52.0).contains(&saving), "{saving}");
    assert!(s.contains("deep ensemble of 4"));
    assert_eq!(run(&["flops", "--preset", "Z/99"]).status.code(), Some(2));
    assert_eq!(run(&["flops", "--preset", "B/32", "--variant", "pbe", "--k", "1", "--m", "3"]).status.code(), Some(2));
}
