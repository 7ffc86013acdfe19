use std::path::{Path, PathBuf};

use overfill::cli::main_with;
use overfill::config::RunConfig;
use overfill_core::corpus::TaskKind;
use overfill_core::model::ModelConfig;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with(std::iter::once("overfill").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn tiny_run(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.name = "tiny".into();
    cfg.model = ModelConfig {
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 4,
        intermediate_dim: 32,
        ..ModelConfig::desk()
    };
    cfg.data.kinds = vec![TaskKind::Copy, TaskKind::Kvlookup];
    cfg.data.train_count = 40;
    cfg.data.eval_count = 4;
    cfg.prune.calib_batches = 2;
    cfg.prune.calib_batch_size = 4;
    cfg.prune.calib_seq_len = 32;
    cfg.train.base.steps = 5;
    cfg.train.base.batch_size = 4;
    cfg.train.decoder.steps = 3;
    cfg.train.decoder.batch_size = 4;
    cfg.gen.max_new_tokens = 6;
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["frobnicate"]).0, 1);
    // --config is required
    assert_eq!(run(&["gen-data"]).0, 1);
    assert_eq!(run(&["generate", "--config", "c.json", "--prompt", "x", "--mode", "sideways"]).0, 1);
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train-overfill"));
}

#[test]
fn data_errors_exit_2_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let (code, _, err) = run(&["gen-data", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("nope.json"), "{err}");

    let bad = dir.path().join("bad.json");
    let mut v = serde_json::to_value(RunConfig::desk()).unwrap();
    v["model"]["n_layers"] = serde_json::json!(-1);
    std::fs::write(&bad, v.to_string()).unwrap();
    let (code, _, err) = run(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("/model/n_layers"), "{err}");

    // a stage whose inputs were never produced
    let cfg = tiny_run(dir.path());
    let out = dir.path().join("run");
    let (code, _, err) = run(&["calibrate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("base.ovfl"), "{err}");
}

#[test]
fn param_count_of_released_geometry() {
    let (code, out, _) = run(&["param-count", "--config", "../../ref/llama3b.json"]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "3212749824");
    let (code, out, _) = run(&["param-count", "--config", "../../ref/llama3b.json", "--p-hidden", "0.45", "--p-inter", "0.45"]);
    assert_eq!(code, 0);
    let line = out.lines().nth(1).unwrap();
    assert!(line.starts_with("pruned 1689 4505 "), "{line}");
    // a run configuration is accepted too
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    assert_eq!(run(&["param-count", "--config", cfg.to_str().unwrap()]).0, 0);
}

#[test]
fn identity_pruning_reproduces_full_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let out = dir.path().join("run");
    let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let step = |cmd: &[&str]| {
        let args: Vec<&str> = cmd.iter().chain(common.iter()).copied().collect();
        let (code, stdout, err) = run(&args);
        assert_eq!(code, 0, "{cmd:?}: {err}");
        stdout
    };
    step(&["gen-data"]);
    step(&["train-base"]);
    step(&["calibrate"]);
    step(&["prune", "--p-hidden", "0", "--p-inter", "0"]);
    for prompt in ["abc", "q=xyz r=def?q", "hello"] {
        let full = step(&["generate", "--prompt", prompt, "--mode", "full"]);
        let over = step(&["generate", "--prompt", prompt, "--mode", "overfill"]);
        assert_eq!(full, over, "{prompt}");
    }
    for f in ["config.json", "data/train.jsonl", "data/eval.jsonl", "checkpoints/base.ovfl", "checkpoints/pruned.ovfl", "scores.json", "selection.json", "logs.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn whole_pipeline_runs_and_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let outputs = ["checkpoints/base.ovfl", "checkpoints/pruned.ovfl", "checkpoints/overfill.ovfl", "checkpoints/standalone.ovfl", "selection.json", "scores.json", "logs.csv", "eval.csv", "roofline.csv", "data/train.jsonl"];
    let mut runs = Vec::new();
    for r in ["a", "b"] {
        let out = dir.path().join(r);
        let common = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        for cmd in [&["gen-data"][..], &["train-base"], &["calibrate"], &["prune"], &["train-overfill"], &["train-overfill", "--standalone"], &["eval"], &["roofline"]] {
            let args: Vec<&str> = cmd.iter().chain(common.iter()).copied().collect();
            let (code, _, err) = run(&args);
            assert_eq!(code, 0, "{cmd:?}: {err}");
        }
        runs.push(outputs.map(|f| std::fs::read(out.join(f)).unwrap()));
    }
    for (i, f) in outputs.iter().enumerate() {
        assert_eq!(runs[0][i], runs[1][i], "{f}");
    }
    let eval = String::from_utf8(runs[0][7].clone()).unwrap();
    assert!(eval.starts_with("system,mode,task,correct,total,accuracy\n"));
    assert_eq!(eval.lines().count(), 1 + 4 * 2);
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        let (code, _, err) = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code, 0, "{err}");
        std::fs::read(out.join("data/train.jsonl")).unwrap()
    };
    assert_ne!(read("1"), read("2"));
}
