//! The end-to-end recipe: data, base model, calibration, pruning, decoder
//! training and evaluation. Every random choice derives from the run seed.

use overfill_core::corpus::{format_chat, gen_mixture, gen_tasks, answer_text, ChatExample, Formatted, TaskKind, Tokenizer};
use overfill_core::engine::{generate, GenParams, Mode};
use overfill_core::model::{init_model, Weights};
use overfill_core::pruner::{
    calibration_batches, collect_activations, compute_pruned_dims, score_channels, select_channels, slice_model,
    ChannelSelection, ImportanceScores, Provenance,
};
use overfill_core::trainer::{fit, LogRow, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Independent sub-seeds of the run seed.
pub mod stream {
    pub const TRAIN_DATA: u64 = 1;
    pub const EVAL_DATA: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BASE_ORDER: u64 = 4;
    pub const CALIB: u64 = 5;
    pub const DECODER_ORDER: u64 = 6;
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Worker pool sized by `OVERFILL_THREADS` (default 1). Work split across
/// it is collected in input order, so results do not depend on the count.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("OVERFILL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Usage(format!("OVERFILL_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Usage(e.to_string()))
}

/// Training examples (round-robin over the configured kinds) and a held-out
/// evaluation set drawn from a separate seed stream, `eval_count` per kind.
pub fn gen_data(cfg: &RunConfig) -> Result<(Vec<ChatExample>, Vec<ChatExample>)> {
    let kinds = &cfg.data.kinds;
    let train = gen_mixture(kinds, derive_seed(cfg.seed, stream::TRAIN_DATA), cfg.data.train_count)?;
    let eval_seed = derive_seed(cfg.seed, stream::EVAL_DATA);
    let mut eval = Vec::new();
    for &k in kinds {
        eval.extend(gen_tasks(k, eval_seed, cfg.data.eval_count)?);
    }
    Ok((train, eval))
}

pub fn format_all(examples: &[ChatExample]) -> Vec<Formatted> {
    examples.iter().map(|e| format_chat(e, &Tokenizer)).collect()
}

/// Fits a freshly initialized full model on the training set.
pub fn train_base(cfg: &RunConfig, train: &[ChatExample]) -> Result<(Weights, Vec<LogRow>)> {
    let mut w = init_model(&cfg.model, derive_seed(cfg.seed, stream::INIT))?;
    let mut log = Vec::new();
    fit(
        None,
        &mut w,
        &format_all(train),
        &cfg.train.base,
        derive_seed(cfg.seed, stream::BASE_ORDER),
        |r| log.push(r),
    )?;
    Ok((w, log))
}

/// Channel importance of `base` over calibration windows cut from `train`.
pub fn calibrate(cfg: &RunConfig, base: &Weights, train: &[ChatExample]) -> Result<ImportanceScores> {
    // shuffle which examples feed calibration without touching the training order
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(cfg.seed, stream::CALIB));
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let picked: Vec<ChatExample> = idx.iter().map(|&i| train[i].clone()).collect();
    let calib = calibration_batches(&picked, &Tokenizer, &cfg.prune)?;
    Ok(score_channels(&collect_activations(base, &calib)?)?)
}

/// Top channels under the configured ratios, and the sliced model.
pub fn prune_from_scores(cfg: &RunConfig, base: &Weights, scores: &ImportanceScores) -> Result<(Weights, ChannelSelection)> {
    let (d, i) = compute_pruned_dims(base.config.hidden_dim, base.config.intermediate_dim, &cfg.prune)?;
    let mut sel = select_channels(scores, d, i)?;
    sel.provenance = Some(Provenance {
        calib_seed: derive_seed(cfg.seed, stream::CALIB),
        p_hidden: cfg.prune.p_hidden,
        p_intermediate: cfg.prune.p_intermediate,
    });
    let (pruned, _) = slice_model(base, &sel, &base.config)?;
    Ok((pruned, sel))
}

/// Trains a copy of `pruned` either behind the frozen `base` prefill
/// (`overfill = true`) or on its own. Both see the same batches.
pub fn train_decoder(
    cfg: &RunConfig,
    base: &Weights,
    pruned: &Weights,
    train: &[ChatExample],
    overfill: bool,
) -> Result<(Weights, Vec<LogRow>)> {
    train_decoder_with(&cfg.train.decoder, derive_seed(cfg.seed, stream::DECODER_ORDER), base, pruned, train, overfill)
}

pub fn train_decoder_with(
    tc: &TrainConfig,
    order_seed: u64,
    base: &Weights,
    pruned: &Weights,
    train: &[ChatExample],
    overfill: bool,
) -> Result<(Weights, Vec<LogRow>)> {
    let mut frozen = base.clone();
    frozen.frozen = true;
    let mut decoder = pruned.clone();
    decoder.frozen = false;
    let mut log = Vec::new();
    let prefill = overfill.then_some(&frozen);
    fit(prefill, &mut decoder, &format_all(train), tc, order_seed, |r| log.push(r))?;
    Ok((decoder, log))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub mode: Mode,
    pub task: TaskKind,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Whether each example's generated answer matches its reference exactly.
pub fn exact_matches(
    mode: Mode,
    full: &Weights,
    decoder: &Weights,
    eval: &[ChatExample],
    params: &GenParams,
    pool: &rayon::ThreadPool,
) -> Result<Vec<bool>> {
    let tok = Tokenizer;
    pool.install(|| {
        eval.par_iter()
            .map(|ex| {
                let f = format_chat(ex, &tok);
                let out = generate(mode, full, decoder, f.prompt(), params)?;
                Ok(answer_text(&out, &tok) == ex.assistant)
            })
            .collect()
    })
}

/// Exact-match accuracy per task kind.
pub fn evaluate(
    mode: Mode,
    full: &Weights,
    decoder: &Weights,
    eval: &[ChatExample],
    params: &GenParams,
    pool: &rayon::ThreadPool,
) -> Result<Vec<EvalRow>> {
    let hits = exact_matches(mode, full, decoder, eval, params, pool)?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for (ex, hit) in eval.iter().zip(hits) {
        let row = match rows.iter_mut().find(|r| r.task == ex.task_kind) {
            Some(r) => r,
            None => {
                rows.push(EvalRow {
                    mode,
                    task: ex.task_kind,
                    correct: 0,
                    total: 0,
                    accuracy: 0.0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.total += 1;
        row.correct += hit as usize;
    }
    for r in &mut rows {
        r.accuracy = r.correct as f64 / r.total as f64;
    }
    Ok(rows)
}

/// Everything one run produces.
pub struct Outputs {
    pub train: Vec<ChatExample>,
    pub eval: Vec<ChatExample>,
    pub base: Weights,
    pub base_log: Vec<LogRow>,
    pub scores: ImportanceScores,
    pub selection: ChannelSelection,
    pub pruned: Weights,
    pub overfill: Weights,
    pub overfill_log: Vec<LogRow>,
    pub standalone: Weights,
    pub standalone_log: Vec<LogRow>,
}

pub fn run_all(cfg: &RunConfig) -> Result<Outputs> {
    let (train, eval) = gen_data(cfg)?;
    let (base, base_log) = train_base(cfg, &train)?;
    let scores = calibrate(cfg, &base, &train)?;
    let (pruned, selection) = prune_from_scores(cfg, &base, &scores)?;
    let (overfill, overfill_log) = train_decoder(cfg, &base, &pruned, &train, true)?;
    let (standalone, standalone_log) = train_decoder(cfg, &base, &pruned, &train, false)?;
    Ok(Outputs {
        train,
        eval,
        base,
        base_log,
        scores,
        selection,
        pruned,
        overfill,
        overfill_log,
        standalone,
        standalone_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_stream_and_seed() {
        let s: Vec<u64> = (1..=6).map(|k| derive_seed(0, k)).collect();
        for i in 0..s.len() {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_ne!(derive_seed(1, 1), derive_seed(0, 1));
    }
}
