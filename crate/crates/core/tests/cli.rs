use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "data": {"trajectories": 60, "steps": 6},
  "train": {"epochs": 4, "lr_schedule": "constant", "learning_rate": 0.01},
  "eval": {"pairs": 5, "horizon_steps": 200},
  "mesh": {"lo": [-2, -2], "hi": [2, 2], "resolution": 15},
  "certify": {"samples": 500}
}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebm-sysid")).args(args).output().expect("spawn")
}

fn run_in(dir: &Path, cfg: &str, args: &[&str]) -> Output {
    let c = dir.join("cfg.json");
    std::fs::write(&c, cfg).unwrap();
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--config", c.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    bin(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn with(cfg: &str, key: &str, value: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(cfg).unwrap();
    let mut cur = &mut v;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur.as_object_mut().unwrap().entry(p.to_string()).or_insert(serde_json::json!({}));
    }
    cur[parts[parts.len() - 1]] = serde_json::from_str(value).unwrap();
    v.to_string()
}

#[test]
fn every_command_has_help_and_unknown_flags_fail() {
    for cmd in ["gen-data", "train", "eval", "certify", "export-grid", "sweep"] {
        let o = bin(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("--config") && text.contains("--seed") && text.contains("--out"), "{cmd}: {text}");
        assert_eq!(code(&bin(&[cmd, "--no-such-flag"])), 2, "{cmd}");
    }
    assert!(String::from_utf8_lossy(&bin(&["train", "--help"]).stdout).contains("[default: 50]"));
}

#[test]
fn config_errors_name_the_position() {
    let d = TempDir::new().unwrap();
    let o = run_in(d.path(), "{\n  \"seed\": 1,\n  \"sede\": 2\n}", &["gen-data"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sede") && err.contains("line 3"), "{err}");
    assert_eq!(code(&run_in(d.path(), &with(SMALL, "data.dt", "-1"), &["gen-data"])), 2);
}

#[test]
fn missing_or_tampered_dataset_is_a_data_error() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run_in(d.path(), SMALL, &["train"])), 3);
    assert_eq!(code(&run_in(d.path(), SMALL, &["gen-data"])), 0);
    let p = d.path().join("dataset.csv");
    let text = std::fs::read_to_string(&p).unwrap();
    let line = text.lines().nth(1).unwrap().to_string();
    let changed = line.replacen(',', ",9", 2);
    std::fs::write(&p, text.replacen(&line, &changed, 1)).unwrap();
    let o = run_in(d.path(), SMALL, &["train"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn condition_and_metric_failures_have_their_own_codes() {
    let d = TempDir::new().unwrap();
    let bad_arch = with(
        SMALL,
        "architecture",
        r#"{"layers": [{"width": 2, "kind": "quadratic"}, {"width": 8, "kind": "power_norm", "params": {"q": 3}}]}"#,
    );
    let o = run_in(d.path(), &bad_arch, &["train", "--generate"]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    let bad_metric = with(SMALL, "metric", r#"{"kind": "learned", "eps": 0.001}"#);
    let o = run_in(d.path(), &bad_metric, &["train", "--generate"]);
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let d = TempDir::new().unwrap();
    let cfg = with(SMALL, "train.learning_rate", "1e300");
    let o = run_in(d.path(), &cfg, &["train", "--generate"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = std::fs::read_to_string(d.path().join("checkpoint.json")).unwrap();
    assert!(ebm_sysid::ident::Checkpoint::from_json(&ck).unwrap().system().is_ok());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(code(&run_in(a.path(), SMALL, &["train", "--generate"])), 0);
    let half = with(SMALL, "train.epochs", "2");
    assert_eq!(code(&run_in(b.path(), &half, &["train", "--generate"])), 0);
    let ck = b.path().join("checkpoint.json");
    let o = run_in(b.path(), SMALL, &["train", "--resume", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.json", "loss_curve.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_certify_and_export_write_their_files() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run_in(d.path(), SMALL, &["train", "--generate"])), 0);
    let o = run_in(d.path(), SMALL, &["certify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("r_ex") && out.contains("rho_ex"), "{out}");
    let cert: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("certificate.json")).unwrap()).unwrap();
    let (r, lo, hi, rho) = (cert["r_ex"].as_f64().unwrap(), cert["q_min"].as_f64().unwrap(), cert["q_max"].as_f64().unwrap(), cert["rho_ex"].as_f64().unwrap());
    assert_eq!(rho, (hi / lo) * r);

    assert_eq!(code(&run_in(d.path(), SMALL, &["eval"])), 0);
    let ev: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(ev["attractors"]["pairs"], 5);

    let o = run_in(d.path(), SMALL, &["export-grid", "--mesh-res", "9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = d.path().join("grids");
    let energy = std::fs::read_to_string(g.join("energy.csv")).unwrap();
    assert!(energy.starts_with("x,y,energy\n"));
    assert_eq!(energy.lines().count(), 1 + 81);
    for f in ["field_learned.csv", "field_true.csv"] {
        assert!(std::fs::read_to_string(g.join(f)).unwrap().starts_with("x,y,fx,fy\n"));
    }
    let pairs = std::fs::read_to_string(g.join("pairs.csv")).unwrap();
    assert!(pairs.starts_with("pair,step,t,x_true,y_true,x_model,y_model\n"));

    assert_eq!(code(&run_in(d.path(), SMALL, &["export-grid", "--mesh-res", "0"])), 2);
}

#[test]
fn sweep_summaries() {
    let d = TempDir::new().unwrap();
    let grid = d.path().join("grid.json");
    std::fs::write(&grid, "{}").unwrap();
    assert_eq!(code(&run_in(d.path(), SMALL, &["sweep", "--grid", grid.to_str().unwrap()])), 0);
    let s = std::fs::read_to_string(d.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(s, "run,config_hash,overrides,status,train_loss,test_loss,r_ex,rho_ex\n");

    std::fs::write(&grid, r#"{"train.epochs": [1, 2], "metric.eps": [0.001]}"#).unwrap();
    let o = run_in(d.path(), SMALL, &["sweep", "--grid", grid.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = std::fs::read_to_string(d.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(s.lines().count(), 3);
    assert!(s.lines().skip(1).all(|l| l.contains("failed")), "{s}");

    std::fs::write(&grid, r#"{"train.learning_rate": [0.001, 0.01], "train.lambda_rollout": [0, 0.1]}"#).unwrap();
    let mut summaries = Vec::new();
    for _ in 0..2 {
        assert_eq!(code(&run_in(d.path(), SMALL, &["sweep", "--grid", grid.to_str().unwrap()])), 0);
        summaries.push(std::fs::read_to_string(d.path().join("sweep_summary.csv")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
    assert_eq!(summaries[0].lines().count(), 5);
    assert!(summaries[0].lines().skip(1).all(|l| l.contains(",ok,")), "{}", summaries[0]);
}

#[test]
fn gen_data_reports_counts() {
    let d = TempDir::new().unwrap();
    let o = run_in(d.path(), "{}", &["gen-data"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("22000 samples") && out.contains("1600/400 trajectory split"), "{out}");
    let o = run_in(d.path(), r#"{"data": {"trajectories": 1}}"#, &["gen-data"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("11 samples"));
    assert_eq!(std::fs::read_to_string(d.path().join("dataset.csv")).unwrap().lines().count(), 12);
}

#[test]
fn export_grid_at_resolution_two() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run_in(d.path(), SMALL, &["train", "--generate"])), 0);
    assert_eq!(code(&run_in(d.path(), SMALL, &["export-grid", "--mesh-res", "2"])), 0);
    for f in ["energy.csv", "field_learned.csv", "field_true.csv"] {
        assert_eq!(std::fs::read_to_string(d.path().join("grids").join(f)).unwrap().lines().count(), 5, "{f}");
    }
}

#[test]
fn zero_weight_identity_model_certifies_trivially() {
    use ebm_sysid::dynamics::{MetricField, PhSystem};
    use ebm_sysid::energy::{ConvexPrimitive, HybridEbm, LayerSpec};
    let d = TempDir::new().unwrap();
    let m = HybridEbm::zeros(
        vec![LayerSpec::new(2, ConvexPrimitive::Quadratic), LayerSpec::new(4, ConvexPrimitive::softmax())],
        true,
    )
    .unwrap();
    let ck = d.path().join("zero.json");
    let sys = PhSystem::new(m, MetricField::Identity).unwrap();
    std::fs::write(&ck, ebm_sysid::ident::Checkpoint::of(&sys, None).to_json()).unwrap();
    let o = run_in(d.path(), SMALL, &["certify", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("r_ex   = 0.000000e0") && out.contains("rho_ex = 0.000000e0") && out.contains("PASS"), "{out}");
}
