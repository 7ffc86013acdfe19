mod common;

use common::{random_selection, random_tokens, small};
use overfill_core::model::{cache_shape, decode_step, forward_logits, forward_prefill, init_model, KVCache};
use overfill_core::perfmodel::param_count;
use overfill_core::pruner::slice_model;
use overfill_core::Error;
use proptest::prelude::*;

#[test]
fn allocated_elements_match_param_count() {
    for cfg in [small(), overfill_core::model::ModelConfig::desk()] {
        for tied in [true, false] {
            let mut c = cfg.clone();
            c.tied_embeddings = tied;
            let w = init_model(&c, 0).unwrap();
            let allocated: usize = w.named_tensors().iter().map(|(_, t)| t.len()).sum();
            assert_eq!(allocated as u64, param_count(&c));
            assert_eq!(w.param_count() as u64, param_count(&c));
        }
    }
}

#[test]
fn incremental_cache_equals_batched_cache() {
    let w = init_model(&small(), 4).unwrap();
    let tokens = random_tokens(12, 1);
    let mut batched = KVCache::for_config(&w.config);
    forward_prefill(&w, &tokens, &mut batched).unwrap();
    let mut inc = KVCache::for_config(&w.config);
    forward_prefill(&w, &tokens[..1], &mut inc).unwrap();
    for (p, &t) in tokens.iter().enumerate().skip(1) {
        decode_step(&w, t, &mut inc, p).unwrap();
    }
    assert_eq!(inc.filled_len(), 12);
    for l in 0..w.config.n_layers {
        let (a, b) = (batched.layer(l), inc.layer(l));
        for (x, y) in a.keys.iter().zip(&b.keys).chain(a.values.iter().zip(&b.values)) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn single_token_prompt_fills_one_slot() {
    let w = init_model(&small(), 4).unwrap();
    let mut cache = KVCache::for_config(&w.config);
    forward_prefill(&w, &[5], &mut cache).unwrap();
    assert_eq!(cache.filled_len(), 1);
    assert_eq!(
        decode_step(&w, 5, &mut cache, 3).unwrap_err(),
        Error::PositionMismatch { position: 3, filled: 1 }
    );
}

#[test]
fn pruned_model_extends_full_model_cache() {
    let cfg = small();
    let w = init_model(&cfg, 2).unwrap();
    let (p, pc) = slice_model(&w, &random_selection(&cfg, 9, 20, 3), &cfg).unwrap();
    assert_eq!(cache_shape(&pc), cache_shape(&cfg));
    let mut cache = KVCache::for_config(&cfg);
    forward_prefill(&w, &random_tokens(7, 2), &mut cache).unwrap();
    let row = cache.layer(0).keys.len() / 7;
    let logits = decode_step(&p, 42, &mut cache, 7).unwrap();
    assert_eq!(logits.shape(), &[cfg.vocab_size]);
    assert_eq!(cache.filled_len(), 8);
    assert_eq!(cache.layer(1).values.len(), 8 * row);
}

#[test]
fn swapping_prompt_tokens_changes_last_logits() {
    let w = init_model(&small(), 5).unwrap();
    let a = forward_logits(&w, &[10, 20, 30, 40]).unwrap();
    let b = forward_logits(&w, &[20, 10, 30, 40]).unwrap();
    assert_ne!(a.row(3), b.row(3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decode_matches_batched_logits(seed in 0u64..1000, n in 1usize..16, split in 1usize..16) {
        let w = init_model(&small(), seed).unwrap();
        let tokens = random_tokens(n, seed);
        let split = split.min(n);
        let batched = forward_logits(&w, &tokens).unwrap();
        let mut cache = KVCache::for_config(&w.config);
        let pre = forward_prefill(&w, &tokens[..split], &mut cache).unwrap();
        for (x, y) in pre.logits_last.data().iter().zip(batched.row(split - 1)) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
        for p in split..n {
            let logits = decode_step(&w, tokens[p], &mut cache, p).unwrap();
            for (x, y) in logits.data().iter().zip(batched.row(p)) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn later_tokens_never_change_earlier_logits(seed in 0u64..1000, n in 2usize..12, at in 1usize..12, tok in 0u32..260) {
        let w = init_model(&small(), seed).unwrap();
        let mut tokens = random_tokens(n, seed);
        let at = at.min(n - 1);
        let before = forward_logits(&w, &tokens).unwrap();
        tokens[at] = tok;
        let after = forward_logits(&w, &tokens).unwrap();
        for r in 0..at {
            prop_assert_eq!(before.row(r), after.row(r));
        }
    }

    #[test]
    fn cache_shape_is_width_independent(d in 1usize..64, i in 1usize..512) {
        let mut c = small();
        let full = cache_shape(&c);
        c.hidden_dim = d;
        c.intermediate_dim = i;
        prop_assert_eq!(cache_shape(&c), full);
    }
}
