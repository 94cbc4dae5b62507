use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

fn experiments(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../experiments").join(name)
}

fn arith(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arith"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn arith")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bench_smoke_writes_one_row_per_method() {
    let dir = TempDir::new().unwrap();
    let config = experiments("bench_smoke.json");
    let start = Instant::now();
    let o = arith(&["bench", "--config", config.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,val_acc_mean,val_acc_sd,domain3_mean,domain3_sd,avg_mean,avg_sd");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["ERM", "Fish", "Arith"]);
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["seeds"], serde_json::json!([0]));
}

#[test]
fn repeated_bench_runs_are_byte_identical() {
    let config = experiments("bench_smoke.json");
    let run = || {
        let dir = TempDir::new().unwrap();
        let o = arith(&["bench", "--config", config.to_str().unwrap(), "--seed", "3"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(dir.path().join("bench.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn missing_config_names_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    let o = arith(&["bench", "--config", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(experiments("bench_smoke.json")).unwrap()).unwrap();
    config["base"]["learning_rate_typo"] = serde_json::json!(0.1);
    let path = dir.path().join("bad.json");
    fs::write(&path, config.to_string()).unwrap();
    let o = arith(&["bench", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate_typo"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let o = arith(&["no-such-command"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn default_quadratic_run_reports_the_two_point_fixed_points() {
    let dir = TempDir::new().unwrap();
    let o = arith(&["quadratic"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("quadratic.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scheme,lr,n,centroid_dist,spread,iters_to_converge"));
    let dist = |scheme: &str, lr: &str| -> f64 {
        csv.lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|f| f[0] == scheme && f[1] == lr)
            .map(|f| f[3].parse().unwrap())
            .unwrap()
    };
    assert!((dist("arithmetic(1)", "0.5") - 0.2).abs() <= 1e-10);
    assert!((dist("constant(1)", "0.5") - 1.0 / 3.0).abs() <= 1e-10);

    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("quadratic.json")).unwrap()).unwrap();
    let signed: Vec<f64> = sidecar["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["lr"] == 0.5)
        .map(|r| r["fixed_point"][0].as_f64().unwrap())
        .collect();
    assert!((signed[0] - 0.2).abs() <= 1e-10 && (signed[1] + 1.0 / 3.0).abs() <= 1e-10, "{signed:?}");
}

#[test]
fn adamtrace_final_row_holds_geometric_shares() {
    let dir = TempDir::new().unwrap();
    let o = arith(&["adamtrace"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("adamtrace.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,domain_0,domain_1,domain_2");
    assert_eq!(lines.len(), 51);
    let mut shares: Vec<f64> = lines[50].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    shares.sort_by(|a, b| b.total_cmp(a));
    for (got, want) in shares.iter().zip([0.369, 0.332, 0.299]) {
        assert!((got - want).abs() <= 0.02, "{shares:?}");
    }
}

#[test]
fn plane_on_a_two_parameter_model_places_anchor_losses_on_the_grid() {
    let dir = TempDir::new().unwrap();
    let config = serde_json::json!({
        "network": {"layer_sizes": [1, 1], "activation": "tanh", "loss": "squared_error"},
        "suite": {
            "kind": "shifted_regression",
            "weights": [1.5],
            "source_shifts": [-1.0, 0.0, 1.0],
            "target_shifts": [2.0],
            "n_per_domain": 40,
            "noise_sd": 0.1,
            "val_fraction": 0.25,
            "seed": 0
        },
        "seed": 0,
        "inner_lr": 0.05,
        "batch_size": 8,
        "pretrain_steps": 10,
        "anchor_steps": 5,
        "resolution": 11
    });
    let path = dir.path().join("plane.json");
    fs::write(&path, config.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = arith(&["plane", "--config", path.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));

    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("plane.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(out.join("plane.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(csv.lines().next(), Some("a,b,loss_domain0,loss_domain1,loss_domain2,loss_domain3"));
    for (k, anchor) in sidecar["anchors"].as_array().unwrap().iter().enumerate() {
        let (a, b) = (anchor[0].as_f64().unwrap(), anchor[1].as_f64().unwrap());
        let row = rows.iter().find(|r| r[0] == a && r[1] == b).expect("anchor cell");
        let losses: Vec<f64> = sidecar["anchor_losses"][k]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        for (d, want) in losses.iter().enumerate() {
            assert!((row[2 + d] - want).abs() <= 1e-12, "anchor {k} domain {d}");
        }
    }
}

#[test]
fn verify_passes_every_suite() {
    let dir = TempDir::new().unwrap();
    let o = arith(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    for suite in ["identity", "taylor", "centroid", "ledger", "gradcheck"] {
        assert!(out.contains(&format!("PASS {suite}")), "{out}");
    }
}

#[test]
fn verify_can_run_a_single_suite() {
    let dir = TempDir::new().unwrap();
    let o = arith(&["verify", "--suite", "taylor"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS taylor"));
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 1);

    let o = arith(&["verify", "--suite", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_metrics_and_run_record() {
    let dir = TempDir::new().unwrap();
    let config = experiments("train.json");
    let o = arith(&["train", "--config", config.to_str().unwrap(), "--seed", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("iter,train_loss,val_acc,target_acc"));
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["result"]["config"]["seed"], 2);
}
