use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config(out: &Path) -> Value {
    json!({
        "name": "tiny",
        "task": {"kind": "fully_observed_linear", "n_h": 3, "n_s": 3, "seq_len": 8},
        "arch": {
            "layers": ["linear"], "heads": 1, "key_size": 6, "token_dim": 9, "embed_dim": 9,
            "input_embedding": false, "use_mlp": false, "use_layernorm": false,
            "positional": {"kind": "none"}, "activation_clip": 4.0, "readout": "first_dims",
            "out_dim": 3, "qk_normalize": false, "init_std": 0.0141
        },
        "train": {
            "steps": 6, "batch_size": 4, "peak_lr": 1e-3, "warmup_steps": 1, "cosine_steps": 6,
            "final_lr": 1e-5, "weight_decay": 0.1, "eval_every": 2, "eval_batch": 8,
            "schedule": "constant", "tokens": {"kind": "constructed", "channels": "three"},
            "deterministic": true
        },
        "analyses": [
            {"kind": "probe", "probe": "token", "layers": [0], "t": [5], "lags": [0, 1], "batch": 32},
            {"kind": "maps", "layer": 0, "batch": 4},
            {"kind": "distill", "layer": 0, "batch": 8, "options": {"steps": 3, "lr": 1e-3, "batch": 4}}
        ],
        "seeds": [0],
        "gen_batch": 5,
        "output_dir": out
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn mesa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mesa")).args(args).env_remove("MESA_OUTPUT_DIR").output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), "c.json", &tiny_config(&runs));
    let c = cfg.to_str().unwrap();
    for cmd in ["gen", "train", "probe", "maps", "distill"] {
        ok(&mesa(&[cmd, "--config", c]));
    }
    let seed = runs.join("seed0");
    for f in ["batch.mesa", "task.json", "final.mesa", "checkpoint.mesa", "distill.csv", "maps_summary.csv"] {
        assert!(seed.join(f).exists(), "{f} missing");
    }
    let metrics = read(&seed.join("metrics.csv"));
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["2", "4", "6"]);
    assert!(metrics.starts_with("step,lr,train_loss,eval_loss,grad_norm,wallclock_s\n"));
    let probe = read(&seed.join("probe_0_token.csv"));
    assert_eq!(probe.lines().count(), 3);
    let map = read(&seed.join("attention_layer0_head0.csv"));
    assert_eq!(map.lines().count(), 9);
    assert!(read(&runs.join("aggregate.csv")).starts_with("step,seeds,lr_mean,lr_std"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full_out = tmp.path().join("full");
    let full = write_config(tmp.path(), "full.json", &tiny_config(&full_out));
    ok(&mesa(&["train", "--config", full.to_str().unwrap()]));

    let part_out = tmp.path().join("part");
    let mut short = tiny_config(&part_out);
    short["train"]["steps"] = json!(4);
    let short_path = write_config(tmp.path(), "short.json", &short);
    ok(&mesa(&["train", "--config", short_path.to_str().unwrap()]));
    let long_path = write_config(tmp.path(), "long.json", &tiny_config(&part_out));
    ok(&mesa(&["train", "--config", long_path.to_str().unwrap(), "--resume"]));

    assert_eq!(read(&full_out.join("seed0/metrics.csv")), read(&part_out.join("seed0/metrics.csv")));
    assert_eq!(std::fs::read(full_out.join("seed0/final.mesa")).unwrap(), std::fs::read(part_out.join("seed0/final.mesa")).unwrap());
}

#[test]
fn divergence_exits_with_code_three_and_keeps_other_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let mut cfg = tiny_config(&out);
    cfg["train"]["peak_lr"] = json!(1e200);
    cfg["train"]["grad_clip_norm"] = json!(1e300);
    cfg["seeds"] = json!([0, 1]);
    let p = write_config(tmp.path(), "c.json", &cfg);
    let o = mesa(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("seed 0") && err.contains("seed 1"), "{err}");
    assert!(out.join("aggregate.csv").exists());
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let mut cfg = tiny_config(&out);
    cfg["train"]["momentum"] = json!(0.9);
    let p = write_config(tmp.path(), "bad.json", &cfg);
    let o = mesa(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let good = write_config(tmp.path(), "good.json", &tiny_config(&out));
    ok(&mesa(&["train", "--config", good.to_str().unwrap()]));
    let mut other = tiny_config(&out);
    other["arch"]["key_size"] = json!(4);
    let other = write_config(tmp.path(), "other.json", &other);
    let o = mesa(&["probe", "--config", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match architecture"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eos_evaluation_without_tokens_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let mut cfg = tiny_config(&out);
    cfg["arch"]["token_dim"] = json!(3);
    cfg["arch"]["embed_dim"] = json!(3);
    cfg["arch"]["key_size"] = json!(3);
    cfg["train"]["tokens"] = json!({"kind": "raw"});
    cfg["analyses"] = json!([{"kind": "icl", "variant": "eos", "n_pairs": 3, "tasks": 4}]);
    let p = write_config(tmp.path(), "c.json", &cfg);
    ok(&mesa(&["train", "--config", p.to_str().unwrap()]));
    let o = mesa(&["icl", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prompt"), "{}", String::from_utf8_lossy(&o.stderr));

    let mut plain = cfg.clone();
    plain["analyses"] = json!([{"kind": "icl", "variant": "plain", "n_pairs": 3, "tasks": 4}]);
    let p = write_config(tmp.path(), "plain.json", &plain);
    ok(&mesa(&["icl", "--config", p.to_str().unwrap()]));
    let curve = read(&out.join("seed0/icl_plain.csv"));
    assert!(curve.starts_with("i,loss,lsq_correct,lsq_spurious\n"));
}

#[test]
fn verify_reports_failures_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mesa(&["verify", "mesa", "--mesa-lambda", "-1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_str(&read(&tmp.path().join("verify_mesa.json"))).unwrap();
    assert_eq!(report["passed"], json!(false));
    ok(&mesa(&["verify", "prop1"]));
}
