use std::path::Path;
use std::process::{Command, Output};

use mugs::config::TrainConfig;

fn mugs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mugs")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn micro_config(dir: &Path, data: &Path, name: &str) -> String {
    let cfg = TrainConfig {
        data: data.display().to_string(),
        out_dir: dir.join(name).display().to_string(),
        checkpoint_every: 1,
        ..TrainConfig::micro()
    };
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.display().to_string()
}

#[test]
fn help_lists_every_subcommand_and_flag() {
    let o = mugs(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["pretrain", "eval-knn", "eval-linear", "export-features", "gen-synth", "audit"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let o = mugs(&["pretrain", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--config", "--resume", "--lambdas", "--data", "--out-dir"] {
        assert!(text.contains(flag), "{flag} missing from pretrain help");
    }
    let o = mugs(&["gen-synth", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--seed", "--out", "--n-per-fine"] {
        assert!(text.contains(flag), "{flag} missing from gen-synth help");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mugs(&[]).status.code(), Some(2));
    assert_eq!(mugs(&["pretrain"]).status.code(), Some(2));
    assert_eq!(mugs(&["bogus"]).status.code(), Some(2));
    let o = mugs(&["pretrain", "--config", "x.json", "--lambdas", "1,0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"epochs": 3, "learning_rate_typo": 0.1}"#).unwrap();
    let o = mugs(&["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate_typo"), "{}", stderr(&o));
}

#[test]
fn out_of_range_value_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"batch_size": 0}"#).unwrap();
    let o = mugs(&["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), &dir.path().join("nowhere"), "run");
    let o = mugs(&["pretrain", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn synth_pretrain_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let test = dir.path().join("test");
    let s = |p: &Path| p.display().to_string();
    assert_eq!(mugs(&["gen-synth", "--seed", "7", "--out", &s(&data), "--n-per-fine", "2"]).status.code(), Some(0));
    assert_eq!(mugs(&["gen-synth", "--seed", "8", "--out", &s(&test), "--n-per-fine", "2"]).status.code(), Some(0));

    let a = micro_config(dir.path(), &data, "a");
    let b = micro_config(dir.path(), &data, "b");
    let o = mugs(&["pretrain", "--config", &a]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(mugs(&["pretrain", "--config", &b]).status.code(), Some(0));
    let metrics_a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "identical runs must write identical metrics");

    let ckpt = s(&dir.path().join("a/checkpoint.mgck"));
    let o = mugs(&["eval-knn", "--checkpoint", &ckpt, "--train", &s(&data), "--test", &s(&test), "--k", "1,3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["per_k"].as_array().unwrap().len(), 2);

    let o = mugs(&["eval-linear", "--checkpoint", &ckpt, "--train", &s(&data), "--test", &s(&test), "--epochs", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let feats = dir.path().join("features.mgft");
    let o = mugs(&["export-features", "--checkpoint", &ckpt, "--data", &s(&data), "--out", &s(&feats)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bank = mugs::eval::FeatureBank::load(&feats).unwrap();
    assert_eq!(bank.len(), 16);
}

#[test]
fn lambda_override_runs_instance_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let s = |p: &Path| p.display().to_string();
    assert_eq!(mugs(&["gen-synth", "--seed", "7", "--out", &s(&data), "--n-per-fine", "2"]).status.code(), Some(0));
    let cfg = micro_config(dir.path(), &data, "abl");
    let o = mugs(&["pretrain", "--config", &cfg, "--lambdas", "1,0,0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = mugs::metrics::read_metrics(&dir.path().join("abl/metrics.csv")).unwrap();
    assert!(!rows.is_empty());
    for m in rows {
        assert!((m.loss_total - m.loss_instance as f64).abs() < 1e-6);
    }
}

#[test]
fn resume_continues_the_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let s = |p: &Path| p.display().to_string();
    assert_eq!(mugs(&["gen-synth", "--seed", "3", "--out", &s(&data), "--n-per-fine", "2"]).status.code(), Some(0));
    let full = micro_config(dir.path(), &data, "full");
    assert_eq!(mugs(&["pretrain", "--config", &full]).status.code(), Some(0));
    let mid = dir.path().join("full/checkpoint_epoch0001.mgck");
    let result = std::fs::read(dir.path().join("full/metrics.csv")).unwrap();
    // resume into the same directory: rows after the checkpoint are rewritten identically
    let o = mugs(&["pretrain", "--config", &full, "--resume", &s(&mid)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("full/metrics.csv")).unwrap(), result);
}
