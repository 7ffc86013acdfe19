mod common;

use common::{random_selection, small};
use overfill_core::corpus::{format_chat, gen_mixture, gen_tasks, Formatted, TaskKind, Tokenizer};
use overfill_core::model::{decode_step, forward_prefill, init_model, KVCache, ModelConfig, Weights};
use overfill_core::pruner::{slice_model, ChannelSelection};
use overfill_core::tensor::softmax_rows;
use overfill_core::trainer::{
    fit, loss_and_grads, position_prob_profile, reference_probs, train_step, OptState, TrainBatch, TrainConfig,
};
use overfill_core::Error;

fn rows(kind: TaskKind, seed: u64, n: usize) -> Vec<Formatted> {
    gen_tasks(kind, seed, n)
        .unwrap()
        .iter()
        .map(|e| format_chat(e, &Tokenizer))
        .collect()
}

fn split(cfg: &ModelConfig, seed: u64) -> (Weights, Weights) {
    let mut full = init_model(cfg, seed).unwrap();
    let (pruned, _) = slice_model(
        &full,
        &random_selection(cfg, cfg.hidden_dim / 2, cfg.intermediate_dim / 2, seed),
        cfg,
    )
    .unwrap();
    full.frozen = true;
    (full, pruned)
}

#[test]
fn loss_falls_every_step_on_a_fixed_batch() {
    let cfg = ModelConfig::desk();
    let (full, mut pruned) = split(&cfg, 0);
    let batch = TrainBatch::from_formatted(&rows(TaskKind::Reverse, 1, 4), 256).unwrap();
    let mut opt = OptState::new(&pruned, 1e-3, 0.0, 1_000_000);
    let mut prev = f32::INFINITY;
    for step in 0..20 {
        let loss = train_step(&full, &mut pruned, &batch, &mut opt).unwrap();
        assert!(loss < prev, "step {step}: {loss} !< {prev}");
        prev = loss;
    }
}

#[test]
fn frozen_model_is_untouched_by_training() {
    let cfg = small();
    let (full, mut pruned) = split(&cfg, 1);
    let before = full.clone();
    let data = rows(TaskKind::Copy, 2, 32);
    let tc = TrainConfig {
        steps: 100,
        batch_size: 4,
        ..TrainConfig::default()
    };
    fit(Some(&full), &mut pruned, &data, &tc, 3, |_| {}).unwrap();
    assert_eq!(full, before);
    for ((_, a), (_, b)) in full.named_tensors().iter().zip(before.named_tensors()) {
        let bits = |t: &overfill_core::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn unfrozen_prefill_model_rejected() {
    let cfg = small();
    let (mut full, mut pruned) = split(&cfg, 1);
    full.frozen = false;
    let batch = TrainBatch::from_formatted(&rows(TaskKind::Copy, 1, 2), 64).unwrap();
    let mut opt = OptState::new(&pruned, 1e-3, 0.0, 10);
    assert_eq!(
        train_step(&full, &mut pruned, &batch, &mut opt).unwrap_err(),
        Error::NotFrozen
    );
}

#[test]
fn prompt_targets_do_not_affect_the_loss() {
    let cfg = small();
    let (full, pruned) = split(&cfg, 4);
    let batch = TrainBatch::from_formatted(&rows(TaskKind::Modadd, 1, 3), 64).unwrap();
    let mut poked = batch.clone();
    for (t, &m) in poked.targets.iter_mut().zip(&batch.loss_mask) {
        if !m {
            *t = (*t + 17) % 256;
        }
    }
    for prefill in [Some(&full), None] {
        let (a, ga) = loss_and_grads(prefill, &pruned, &batch).unwrap();
        let (b, gb) = loss_and_grads(prefill, &pruned, &poked).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
        assert_eq!(ga.len(), pruned.named_tensors().len());
    }
}

#[test]
fn training_is_reproducible() {
    let cfg = small();
    let data: Vec<Formatted> = gen_mixture(&TaskKind::ALL, 1, 40)
        .unwrap()
        .iter()
        .map(|e| format_chat(e, &Tokenizer))
        .collect();
    let tc = TrainConfig {
        steps: 15,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let (full, mut pruned) = split(&cfg, 9);
        let loss = fit(Some(&full), &mut pruned, &data, &tc, 2, |_| {}).unwrap();
        (loss.to_bits(), pruned)
    };
    assert_eq!(run(), run());
}

/// Scores one example by stepping the decoder token by token.
fn manual_probs(full: &Weights, pruned: &Weights, ex: &Formatted) -> Vec<f64> {
    let m = ex.prefill_len;
    let mut cache = KVCache::for_config(&full.config);
    forward_prefill(full, &ex.tokens[..m - 1], &mut cache).unwrap();
    let mut out = Vec::new();
    for p in m - 1..ex.tokens.len() - 1 {
        let logits = decode_step(pruned, ex.tokens[p], &mut cache, p).unwrap();
        let probs = softmax_rows(&logits.reshape([1, full.config.vocab_size]).unwrap());
        out.push(probs.data()[ex.tokens[p + 1] as usize] as f64);
    }
    out
}

#[test]
fn profile_matches_manual_scoring() {
    let cfg = small();
    let (full, pruned) = split(&cfg, 5);
    let eval = rows(TaskKind::Reverse, 4, 3);
    for ex in &eval {
        let a = reference_probs(&full, &pruned, ex).unwrap();
        let b = manual_probs(&full, &pruned, ex);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    let prof = position_prob_profile(&full, &pruned, &eval, 12).unwrap();
    for t in 0..12 {
        let present: Vec<f64> = eval
            .iter()
            .filter_map(|ex| manual_probs(&full, &pruned, ex).get(t).copied())
            .collect();
        assert_eq!(prof.count[t], present.len());
        if !present.is_empty() {
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            assert!((prof.mean[t] - mean).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&prof.mean[t]));
        }
    }
    assert_eq!(
        position_prob_profile(&full, &pruned, &[], 4).unwrap_err(),
        Error::EmptyInput("evaluation set")
    );
}

#[test]
fn identity_profile_equals_full_model_profile() {
    let cfg = small();
    let full = init_model(&cfg, 6).unwrap();
    let (same, _) = slice_model(&full, &ChannelSelection::all(&cfg), &cfg).unwrap();
    let eval = rows(TaskKind::Kvlookup, 1, 4);
    // 12 positions so some are past every answer and hold NaN
    let a = position_prob_profile(&full, &same, &eval, 12).unwrap();
    let b = position_prob_profile(&full, &full, &eval, 12).unwrap();
    assert_eq!(a.count, b.count);
    assert!(a.mean.iter().any(|x| x.is_nan()));
    for (x, y) in a.mean.iter().zip(&b.mean) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
