//! Teacher-forced training with response-only loss, for both the standalone
//! decoder and the frozen-prefill / pruned-decode split.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{KvPrefix, Segment};
use crate::autograd::Tape;
use crate::corpus::{format_chat, ChatExample, Formatted, Tokenizer, PAD};
use crate::error::{Error, Result};
use crate::model::{extend, forward_prefill, lm_logits, run_pass, KVCache, Weights};
use crate::tensor::{Real, Tensor};

/// Right-padded token rows with a response-only loss mask.
///
/// `targets[b][t]` is the token predicted at position `t` (the next input
/// token, or PAD past the end); `loss_mask[b][t]` is true exactly when that
/// target belongs to the response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub rows: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub prefill_lens: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl TrainBatch {
    pub fn row_tokens(&self, b: usize) -> &[u32] {
        &self.token_ids[b * self.seq_len..b * self.seq_len + self.lengths[b]]
    }

    fn row_slice<'a, X>(&self, data: &'a [X], b: usize) -> &'a [X] {
        &data[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Total non-padding tokens.
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn from_formatted(rows: &[Formatted], max_seq_len: usize) -> Result<Self> {
        let kept: Vec<(&[u32], usize)> = rows
            .iter()
            .map(|f| (&f.tokens[..f.tokens.len().min(max_seq_len)], f.prefill_len))
            .filter(|(t, m)| t.len() > *m)
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyInput("batch rows after truncation"));
        }
        let seq_len = kept.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
        let n = kept.len();
        let mut token_ids = vec![PAD; n * seq_len];
        let mut targets = vec![PAD; n * seq_len];
        let mut loss_mask = vec![false; n * seq_len];
        let mut prefill_lens = Vec::with_capacity(n);
        let mut lengths = Vec::with_capacity(n);
        for (b, (toks, m)) in kept.iter().enumerate() {
            let row = b * seq_len;
            token_ids[row..row + toks.len()].copy_from_slice(toks);
            for t in 0..toks.len() - 1 {
                targets[row + t] = toks[t + 1];
                loss_mask[row + t] = t + 1 >= *m;
            }
            prefill_lens.push(*m);
            lengths.push(toks.len());
        }
        Ok(Self {
            rows: n,
            seq_len,
            token_ids,
            targets,
            loss_mask,
            prefill_lens,
            lengths,
        })
    }
}

/// Formats chat examples, truncates to `max_seq_len`, drops rows with no
/// response left, and right-pads.
pub fn build_batch(examples: &[ChatExample], tok: &Tokenizer, max_seq_len: usize) -> Result<TrainBatch> {
    if examples.iter().any(|e| e.assistant.is_empty()) {
        return Err(Error::EmptyInput("assistant text"));
    }
    let rows: Vec<Formatted> = examples.iter().map(|e| format_chat(e, tok)).collect();
    TrainBatch::from_formatted(&rows, max_seq_len)
}

/// Mean over masked positions of `-log softmax(logits)[target]`.
///
/// `logits` is `[B × T × V]` (or `[B·T × V]`), `targets` and `mask` are `[B × T]`.
pub fn masked_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[u32], mask: &[bool]) -> Result<T> {
    crate::tensor::masked_cross_entropy(logits, targets, mask)
}

/// Adam with decoupled weight decay plus a warmup/cosine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
}

impl OptState {
    pub fn new(w: &Weights<f32>, base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let zeros = || w.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            step: 0,
            base_lr,
            warmup_ratio,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    fn warmup_steps(&self) -> usize {
        libm::ceil(self.warmup_ratio * self.total_steps as f64) as usize
    }

    fn apply(&mut self, w: &mut Weights<f32>, grads: &[Tensor<f32>]) {
        let lr = lr_schedule((self.step + 1).min(self.total_steps), self);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let params = w.tensors_mut();
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv as f64 / c1;
                let vhat = *vv as f64 / c2;
                let update = mhat / (libm::sqrt(vhat) + self.eps) + self.weight_decay * *pv as f64;
                *pv -= (lr * update) as f32;
            }
        }
    }
}

/// Linear warmup over `warmup_ratio · total_steps`, then cosine decay to 0.
pub fn lr_schedule(step: usize, opt: &OptState) -> f64 {
    let warmup = opt.warmup_steps();
    if step < warmup {
        return opt.base_lr * step as f64 / warmup as f64;
    }
    let span = opt.total_steps.saturating_sub(warmup);
    if span == 0 {
        return opt.base_lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    opt.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Keys/values of each row's prompt `x₁..x_{M−1}` from one packed pass of a
/// model, as constants. Indexed `[layer][row]`.
fn prompt_prefixes<T: Real>(full: &Weights<T>, batch: &TrainBatch) -> Result<Vec<Vec<KvPrefix<T>>>> {
    let mut tape = Tape::new();
    let wv = full.record(&mut tape, false);
    let mut tokens = Vec::new();
    let mut segments = Vec::with_capacity(batch.rows);
    for b in 0..batch.rows {
        let m = batch.prefill_lens[b];
        let start = tokens.len();
        tokens.extend_from_slice(&batch.row_tokens(b)[..m - 1]);
        segments.push(Segment { start, len: m - 1 });
    }
    let empty = (0..full.config.n_layers)
        .map(|_| (0..batch.rows).map(|_| KvPrefix::empty()).collect())
        .collect();
    let out = run_pass(&mut tape, &full.config, &wv, &tokens, &segments, empty)?;
    let kw = full.config.kv_dim();
    Ok(out
        .keys
        .iter()
        .zip(&out.values)
        .map(|(k, v)| {
            let (k, v) = (tape.value(*k).data(), tape.value(*v).data());
            segments
                .iter()
                .map(|s| KvPrefix {
                    keys: k[s.start * kw..(s.start + s.len) * kw].to_vec(),
                    values: v[s.start * kw..(s.start + s.len) * kw].to_vec(),
                    len: s.len,
                })
                .collect()
        })
        .collect())
}

fn check_geometry<T: Real>(full: &Weights<T>, pruned: &Weights<T>) -> Result<()> {
    let (a, b) = (full.cache_shape(), pruned.cache_shape());
    if a != b || full.config.vocab_size != pruned.config.vocab_size {
        return Err(Error::GeometryMismatch {
            model: b.as_tuple(),
            cache: a.as_tuple(),
        });
    }
    Ok(())
}

/// Masked loss and its gradient with respect to every tensor of `decoder`
/// (canonical order).
///
/// With `prefill = Some(full)`, each row's prompt except its last token is
/// run through `full` as a constant cache, and `decoder` is teacher-forced
/// from the last prompt token on. With `None`, `decoder` runs the whole row.
pub fn loss_and_grads<T: Real>(
    prefill: Option<&Weights<T>>,
    decoder: &Weights<T>,
    batch: &TrainBatch,
) -> Result<(T, Vec<Tensor<T>>)> {
    let prefixes = match prefill {
        Some(full) => {
            check_geometry(full, decoder)?;
            Some(prompt_prefixes(full, batch)?)
        }
        None => None,
    };
    let mut tape = Tape::new();
    let wv = decoder.record(&mut tape, true);
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    let mut segments = Vec::with_capacity(batch.rows);
    for b in 0..batch.rows {
        let from = if prefixes.is_some() { batch.prefill_lens[b] - 1 } else { 0 };
        let to = batch.lengths[b] - 1;
        segments.push(Segment {
            start: tokens.len(),
            len: to - from,
        });
        tokens.extend_from_slice(&batch.row_tokens(b)[from..to]);
        targets.extend_from_slice(&batch.row_slice(&batch.targets, b)[from..to]);
        mask.extend_from_slice(&batch.row_slice(&batch.loss_mask, b)[from..to]);
    }
    let prefixes = prefixes.unwrap_or_else(|| {
        (0..decoder.config.n_layers)
            .map(|_| (0..batch.rows).map(|_| KvPrefix::empty()).collect())
            .collect()
    });
    let out = run_pass(&mut tape, &decoder.config, &wv, &tokens, &segments, prefixes)?;
    let logits = lm_logits(&mut tape, &wv, out.hidden)?;
    let loss = tape.cross_entropy(logits, &targets, &mask)?;
    let grads = tape.grad_of(loss, &wv.all())?;
    Ok((tape.value(loss).data()[0], grads))
}

/// One OverFill update: `full` (frozen) prefills, only `pruned` is updated.
pub fn train_step(full: &Weights<f32>, pruned: &mut Weights<f32>, batch: &TrainBatch, opt: &mut OptState) -> Result<f32> {
    if !full.frozen {
        return Err(Error::NotFrozen);
    }
    let (loss, grads) = loss_and_grads(Some(full), pruned, batch)?;
    opt.apply(pruned, &grads);
    Ok(loss)
}

/// One update of a single model that handles both prefill and decode.
pub fn train_step_standalone(w: &mut Weights<f32>, batch: &TrainBatch, opt: &mut OptState) -> Result<f32> {
    if w.frozen {
        return Err(Error::InvalidConfig("cannot train a frozen model".into()));
    }
    let (loss, grads) = loss_and_grads(None, w, batch)?;
    opt.apply(w, &grads);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub max_seq_len: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            warmup_ratio: 0.01,
            max_seq_len: 256,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_seen: usize,
}

/// Deterministic epoch-shuffled batch order over `n` examples.
pub struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut order = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: (0..n).collect(),
            cursor: n,
        };
        order.reshuffle();
        order
    }

    fn reshuffle(&mut self) {
        self.perm.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.perm.len()) {
            if self.cursor == self.perm.len() {
                self.reshuffle();
            }
            out.push(self.perm[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Runs `cfg.steps` updates over `data`. With `prefill = Some(full)` this is
/// OverFill training of `decoder`; otherwise standalone fine-tuning.
pub fn fit(
    prefill: Option<&Weights<f32>>,
    decoder: &mut Weights<f32>,
    data: &[Formatted],
    cfg: &TrainConfig,
    seed: u64,
    mut log: impl FnMut(LogRow),
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let mut opt = OptState::new(decoder, cfg.lr, cfg.warmup_ratio, cfg.steps);
    opt.weight_decay = cfg.weight_decay;
    let mut order = BatchOrder::new(data.len(), seed);
    let mut tokens_seen = 0;
    let mut last = f32::NAN;
    for step in 0..cfg.steps {
        let rows: Vec<Formatted> = order.next_batch(cfg.batch_size).into_iter().map(|i| data[i].clone()).collect();
        let batch = TrainBatch::from_formatted(&rows, cfg.max_seq_len)?;
        let lr = lr_schedule((step + 1).min(cfg.steps), &opt);
        last = match prefill {
            Some(full) => train_step(full, decoder, &batch, &mut opt)?,
            None => train_step_standalone(decoder, &batch, &mut opt)?,
        };
        tokens_seen += batch.token_count();
        log(LogRow {
            step: step + 1,
            lr,
            loss: last as f64,
            tokens_seen,
        });
    }
    Ok(last)
}

/// Mean probability assigned to the reference token at each response position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionProfile {
    /// `mean[t]` is the average over examples that reach output position `t + 1`.
    pub mean: Vec<f64>,
    pub count: Vec<usize>,
}

/// Teacher-forced reference-token probabilities by output position, with
/// `full` prefilling `x₁..x_{M−1}` and `pruned` scoring from `x_M` on.
pub fn position_prob_profile<T: Real>(
    full: &Weights<T>,
    pruned: &Weights<T>,
    eval_set: &[Formatted],
    max_pos: usize,
) -> Result<PositionProfile> {
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    check_geometry(full, pruned)?;
    let mut sum = vec![0.0f64; max_pos];
    let mut count = vec![0usize; max_pos];
    for ex in eval_set {
        for (t, p) in reference_probs(full, pruned, ex)?.into_iter().take(max_pos).enumerate() {
            sum[t] += p;
            count[t] += 1;
        }
    }
    let mean = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok(PositionProfile { mean, count })
}

/// Probability of each response token under the split model.
pub fn reference_probs<T: Real>(full: &Weights<T>, pruned: &Weights<T>, ex: &Formatted) -> Result<Vec<f64>> {
    let m = ex.prefill_len;
    if m < 2 || ex.tokens.len() <= m {
        return Err(Error::PromptTooShort(m));
    }
    let mut cache = KVCache::for_config(&full.config);
    forward_prefill(full, &ex.tokens[..m - 1], &mut cache)?;
    let (_, logits) = extend(pruned, &ex.tokens[m - 1..ex.tokens.len() - 1], &mut cache)?;
    let probs = crate::tensor::softmax_rows(&logits);
    Ok(ex.tokens[m..]
        .iter()
        .enumerate()
        .map(|(r, &t)| probs.row(r)[t as usize].as_f64())
        .collect())
}
