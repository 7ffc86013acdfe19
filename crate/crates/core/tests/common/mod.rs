#![allow(dead_code)]

use overfill_core::corpus::VOCAB_SIZE;
use overfill_core::model::ModelConfig;
use overfill_core::pruner::{top_k, ChannelSelection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model small enough for exhaustive checks but with grouped heads.
pub fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 4,
        intermediate_dim: 32,
        norm_eps: 1e-5,
        rope_theta: 10000.0,
        tied_embeddings: true,
    }
}

pub fn random_selection(cfg: &ModelConfig, d: usize, i: usize, seed: u64) -> ChannelSelection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h: Vec<f64> = (0..cfg.hidden_dim).map(|_| rng.random()).collect();
    ChannelSelection {
        hidden_idx: top_k(&h, d),
        inter_idx: (0..cfg.n_layers)
            .map(|_| {
                let s: Vec<f64> = (0..cfg.intermediate_dim).map(|_| rng.random()).collect();
                top_k(&s, i)
            })
            .collect(),
        provenance: None,
    }
}

pub fn random_tokens(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..VOCAB_SIZE as u32)).collect()
}
