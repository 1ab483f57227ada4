use std::path::Path;
use std::process::{Command, Output};

use precdelta::mqar::{ExperimentConfig, ModelConfig};
use precdelta::Variant;

fn precdelta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_precdelta"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

#[test]
fn verify_is_deterministic() {
    let args = ["verify", "--suite", "all", "--seed", "7", "--trials", "100"];
    let (a, b) = (precdelta(&args), precdelta(&args));
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let report = json(&a);
    assert_eq!(report["suite"], "all");
    assert_eq!(report["input_hash"].as_str().unwrap().len(), 64);
    assert!(report["checks"].as_array().unwrap().len() > 10);
}

#[test]
fn verify_counterexample_values() {
    let out = precdelta(&["verify", "--suite", "counterexample"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["pass"], true);
    let ce = &report["extras"]["counterexample"];
    assert_eq!(ce["s_apla"][0][0], 0.5);
    assert_eq!(ce["s_apdn"][0][0], 0.3333333333333333);
}

#[test]
fn verify_csv_format() {
    let out = precdelta(&["verify", "--suite", "pocp", "--trials", "5", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("suite,check,max_deviation,tolerance,samples,pass"));
    assert!(lines.all(|l| l.starts_with("pocp,") && l.ends_with(",true")));
}

#[test]
fn ill_conditioned_instance_fails_check() {
    let out = precdelta(&["verify", "--suite", "theorem1", "--d", "16", "--T", "2", "--lambda", "1e-12"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("check failed: theorem1_d16_T2"));
    assert_eq!(json(&out)["first_failure"], "theorem1_d16_T2");
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["verify", "--suite", "nonsense"][..],
        &["verify", "--bogus"],
        &["verify", "--suite", "equivalence", "--variant", "xyz"],
        &["bench", "--C", "0", "--T", "8"],
        &["frobnicate"],
    ] {
        assert_eq!(precdelta(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn bench_csv() {
    let out = precdelta(&["bench", "--d", "8", "--T", "64,128", "--C", "16", "--repeats", "1", "--warmup", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "variant,T,C,median_ns,sequential_ns,noisy");
    assert_eq!(rows.len(), 3);
    assert!(rows[1..].iter().all(|r| r.starts_with("pgdn,") && r.ends_with(",true")));
}

#[test]
fn mqar_gen_then_eval_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let data_s = data.to_str().unwrap();
    let out = precdelta(&["mqar", "gen", "--pairs", "4", "--len", "64", "--n", "10000", "--seed", "1", "--out", data_s]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 10000);

    let small = dir.path().join("small.jsonl");
    let lines: Vec<&str> = text.lines().take(500).collect();
    std::fs::write(&small, lines.join("\n") + "\n").unwrap();
    let out = precdelta(&["mqar", "eval", "--data", small.to_str().unwrap(), "--vocab", "64"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&out);
    assert_eq!(m["queries"], 2000);
    let (acc, chance) = (m["accuracy"].as_f64().unwrap(), m["chance"].as_f64().unwrap());
    // 2000 queries: 5 standard errors around chance
    let se = (chance * (1.0 - chance) / 2000.0).sqrt();
    assert!((acc - chance).abs() < 5.0 * se, "accuracy {acc} vs chance {chance}");
}

fn tiny_config(path: &Path) {
    let mut cfg = ExperimentConfig::desk(Variant::Pdn, 2, 12, 4, 3);
    cfg.data.vocab_size = 16;
    cfg.data.num_examples = 64;
    cfg.eval_examples = 16;
    cfg.model = ModelConfig {
        d_model: 8,
        d_hidden: 8,
        ..ModelConfig::new(16, Variant::Pdn)
    };
    cfg.train.batch_size = 8;
    cfg.train.warmup_steps = 1;
    std::fs::write(path, serde_json::to_string(&cfg).unwrap()).unwrap();
}

#[test]
fn mqar_train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let run = dir.path().join("run");
    let out = precdelta(&["mqar", "train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["curve.csv", "metrics.json", "model.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["train"]["steps"], 4);

    let data = dir.path().join("d.jsonl");
    let gen = precdelta(&[
        "mqar", "gen", "--vocab", "16", "--pairs", "2", "--len", "12", "--n", "20", "--out", data.to_str().unwrap(),
    ]);
    assert_eq!(gen.status.code(), Some(0));
    let ckpt = run.join("model.ckpt");
    let eval = precdelta(&["mqar", "eval", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(json(&eval)["variant"], "pdn");
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["model"]["dropout"] = 0.1.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = precdelta(&["mqar", "train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropout"));
}
