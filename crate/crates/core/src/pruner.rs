//! Calibration-driven width pruning that keeps attention geometry intact.
//!
//! Activations are tapped at three points per layer (attention input, FFN
//! input, gated FFN activation), reduced to per-channel importance by an L2
//! norm over the batch and a mean over positions, and the top channels are
//! kept. One hidden-channel set is shared by every layer because the residual
//! stream couples them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{KvPrefix, Segment};
use crate::autograd::Tape;
use crate::corpus::{format_chat, ChatExample, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{run_pass, LayerWeights, ModelConfig, Weights};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub p_hidden: f64,
    pub p_intermediate: f64,
    pub calib_batches: usize,
    #[serde(default = "default_calib_batch_size")]
    pub calib_batch_size: usize,
    pub calib_seq_len: usize,
    /// Round pruned widths down to a multiple of this.
    #[serde(default)]
    pub hardware_round_to: Option<usize>,
}

fn default_calib_batch_size() -> usize {
    16
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            p_hidden: 0.5,
            p_intermediate: 0.5,
            calib_batches: 8,
            calib_batch_size: 16,
            calib_seq_len: 128,
            hardware_round_to: None,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_hidden", self.p_hidden), ("p_intermediate", self.p_intermediate)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} outside [0, 1)")));
            }
        }
        if self.calib_batches == 0 || self.calib_batch_size == 0 || self.calib_seq_len == 0 {
            return Err(Error::InvalidConfig("calibration sizes must be positive".into()));
        }
        if self.hardware_round_to == Some(0) {
            return Err(Error::InvalidConfig("hardware_round_to must be positive".into()));
        }
        Ok(())
    }
}

fn retained(dim: usize, ratio: f64, round_to: Option<usize>) -> usize {
    // the epsilon absorbs representation error in exact products like 0.75 · 3072
    let kept = libm::floor((1.0 - ratio) * dim as f64 + 1e-9) as usize;
    match round_to {
        Some(m) => kept / m * m,
        None => kept,
    }
}

/// `(D′, I′) = (⌊(1−P_hidden)·D⌋, ⌊(1−P_intermediate)·I⌋)`, optionally rounded down.
pub fn compute_pruned_dims(hidden: usize, intermediate: usize, cfg: &PruneConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let d = retained(hidden, cfg.p_hidden, cfg.hardware_round_to);
    let i = retained(intermediate, cfg.p_intermediate, cfg.hardware_round_to);
    if d < 1 {
        return Err(Error::PrunedDimTooSmall { which: "hidden", value: d });
    }
    if i < 1 {
        return Err(Error::PrunedDimTooSmall {
            which: "intermediate",
            value: i,
        });
    }
    Ok((d, i))
}

/// Raw activations of one layer, each `[batch × seq × channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub pre_attn: Tensor<f32>,
    pub pre_ffn: Tensor<f32>,
    pub ffn_inner: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
}

/// Calibration windows: the formatted examples are concatenated (cycling if
/// needed) and cut into `calib_batches` batches of `calib_batch_size`
/// sequences of `calib_seq_len` tokens.
pub fn calibration_batches(examples: &[ChatExample], tok: &Tokenizer, cfg: &PruneConfig) -> Result<Vec<Vec<Vec<u32>>>> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("calibration examples"));
    }
    let need = cfg.calib_batches * cfg.calib_batch_size * cfg.calib_seq_len;
    let mut stream = Vec::with_capacity(need);
    for ex in examples.iter().cycle() {
        if stream.len() >= need {
            break;
        }
        stream.extend(format_chat(ex, tok).tokens);
    }
    stream.truncate(need);
    Ok(stream
        .chunks(cfg.calib_batch_size * cfg.calib_seq_len)
        .map(|b| b.chunks(cfg.calib_seq_len).map(<[u32]>::to_vec).collect())
        .collect())
}

/// Runs each calibration batch through `w` and records the three hook points
/// of every layer. Batches are concatenated along the batch axis in order.
pub fn collect_activations<T: Real>(w: &Weights<T>, calib: &[Vec<Vec<u32>>]) -> Result<ActivationStats> {
    let seqs: usize = calib.iter().map(Vec::len).sum();
    let seq_len = calib.iter().flatten().map(Vec::len).next().unwrap_or(0);
    if seqs == 0 || seq_len == 0 {
        return Err(Error::EmptyInput("calibration set"));
    }
    if calib.iter().flatten().any(|s| s.len() != seq_len) {
        return Err(Error::InvalidConfig("calibration sequences differ in length".into()));
    }
    let cfg = &w.config;
    let mut acc: Vec<[Vec<f32>; 3]> = (0..cfg.n_layers).map(|_| [Vec::new(), Vec::new(), Vec::new()]).collect();
    for batch in calib.iter().filter(|b| !b.is_empty()) {
        let mut tape = Tape::new();
        let wv = w.record(&mut tape, false);
        let tokens: Vec<u32> = batch.iter().flatten().copied().collect();
        let segments: Vec<Segment> = (0..batch.len())
            .map(|i| Segment {
                start: i * seq_len,
                len: seq_len,
            })
            .collect();
        let empty = (0..cfg.n_layers)
            .map(|_| (0..batch.len()).map(|_| KvPrefix::empty()).collect())
            .collect();
        let out = run_pass(&mut tape, cfg, &wv, &tokens, &segments, empty)?;
        for (dst, taps) in acc.iter_mut().zip(&out.taps) {
            for (d, v) in dst.iter_mut().zip([taps.pre_attn, taps.pre_ffn, taps.ffn_inner]) {
                d.extend(tape.value(v).data().iter().map(|x| x.as_f64() as f32));
            }
        }
    }
    let layers = acc
        .into_iter()
        .map(|[a, f, i]| {
            Ok(LayerStats {
                pre_attn: Tensor::new([seqs, seq_len, cfg.hidden_dim], a)?,
                pre_ffn: Tensor::new([seqs, seq_len, cfg.hidden_dim], f)?,
                ffn_inner: Tensor::new([seqs, seq_len, cfg.intermediate_dim], i)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ActivationStats { layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// Global hidden-channel scores, summed over layers and both hidden hooks.
    pub hidden: Vec<f64>,
    /// Per-layer FFN intermediate scores.
    pub inter: Vec<Vec<f64>>,
}

/// Mean over positions of the L2 norm over the batch, per channel, for a
/// `[batch × seq × channels]` activation.
pub fn hook_scores(act: &Tensor<f32>) -> Vec<f64> {
    let shape = act.shape();
    let (b, s, c) = (shape[0], shape[1], shape[2]);
    let data = act.data();
    let mut out = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for pos in 0..s {
        sq.iter_mut().for_each(|v| *v = 0.0);
        for batch in 0..b {
            let row = &data[(batch * s + pos) * c..(batch * s + pos + 1) * c];
            for (q, &x) in sq.iter_mut().zip(row) {
                *q += x as f64 * x as f64;
            }
        }
        for (o, &q) in out.iter_mut().zip(&sq) {
            *o += libm::sqrt(q);
        }
    }
    out.iter_mut().for_each(|o| *o /= s as f64);
    out
}

pub fn score_channels(stats: &ActivationStats) -> Result<ImportanceScores> {
    let first = stats.layers.first().ok_or(Error::EmptyInput("activation stats"))?;
    let mut hidden = vec![0.0f64; first.pre_attn.shape()[2]];
    let mut inter = Vec::with_capacity(stats.layers.len());
    for layer in &stats.layers {
        for (h, (a, f)) in hidden
            .iter_mut()
            .zip(hook_scores(&layer.pre_attn).into_iter().zip(hook_scores(&layer.pre_ffn)))
        {
            *h += a + f;
        }
        inter.push(hook_scores(&layer.ffn_inner));
    }
    Ok(ImportanceScores { hidden, inter })
}

/// Where a selection came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub calib_seed: u64,
    pub p_hidden: f64,
    pub p_intermediate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub hidden_idx: Vec<usize>,
    pub inter_idx: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ChannelSelection {
    /// Keeps every channel.
    pub fn all(cfg: &ModelConfig) -> Self {
        Self {
            hidden_idx: (0..cfg.hidden_dim).collect(),
            inter_idx: vec![(0..cfg.intermediate_dim).collect(); cfg.n_layers],
            provenance: None,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let check = |idx: &[usize], bound: usize, what: &str| -> Result<()> {
            if idx.is_empty() {
                return Err(Error::SelectionMismatch(format!("{what} selection is empty")));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::SelectionMismatch(format!("{what} indices not strictly increasing")));
            }
            if idx[idx.len() - 1] >= bound {
                return Err(Error::SelectionMismatch(format!("{what} index out of range {bound}")));
            }
            Ok(())
        };
        check(&self.hidden_idx, cfg.hidden_dim, "hidden")?;
        if self.inter_idx.len() != cfg.n_layers {
            return Err(Error::SelectionMismatch(format!(
                "{} intermediate selections for {} layers",
                self.inter_idx.len(),
                cfg.n_layers
            )));
        }
        let width = self.inter_idx[0].len();
        for idx in &self.inter_idx {
            check(idx, cfg.intermediate_dim, "intermediate")?;
            if idx.len() != width {
                return Err(Error::SelectionMismatch("layers keep different FFN widths".into()));
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest scores, ties to the lower index, sorted ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

pub fn select_channels(scores: &ImportanceScores, hidden: usize, inter: usize) -> Result<ChannelSelection> {
    if hidden > scores.hidden.len() || scores.inter.iter().any(|s| inter > s.len()) {
        return Err(Error::SelectionMismatch(format!(
            "cannot keep {hidden}/{inter} channels of {}",
            scores.hidden.len()
        )));
    }
    Ok(ChannelSelection {
        hidden_idx: top_k(&scores.hidden, hidden),
        inter_idx: scores.inter.iter().map(|s| top_k(s, inter)).collect(),
        provenance: None,
    })
}

fn gather<T: Real>(t: &Tensor<T>, rows: Option<&[usize]>, cols: Option<&[usize]>) -> Tensor<T> {
    let shape = t.shape();
    if shape.len() == 1 {
        let idx = cols.or(rows).expect("vector index");
        return Tensor::new([idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("non-empty");
    }
    let (r, c) = (shape[0], shape[1]);
    let all_rows: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all_rows = (0..r).collect();
            &all_rows
        }
    };
    let mut data = Vec::with_capacity(rows.len() * cols.map_or(c, <[usize]>::len));
    for &i in rows {
        let row = &t.data()[i * c..(i + 1) * c];
        match cols {
            Some(cols) => data.extend(cols.iter().map(|&j| row[j])),
            None => data.extend_from_slice(row),
        }
    }
    Tensor::new([rows.len(), cols.map_or(c, <[usize]>::len)], data).expect("non-empty")
}

/// Cuts `w` down to the selected hidden and intermediate channels. Attention
/// projection widths, head counts, layer count and vocabulary are unchanged.
pub fn slice_model<T: Real>(w: &Weights<T>, sel: &ChannelSelection, full_cfg: &ModelConfig) -> Result<(Weights<T>, ModelConfig)> {
    if &w.config != full_cfg {
        return Err(Error::SelectionMismatch("weights do not match the full config".into()));
    }
    sel.validate(full_cfg)?;
    let h = sel.hidden_idx.as_slice();
    let mut cfg = full_cfg.clone();
    cfg.hidden_dim = h.len();
    cfg.intermediate_dim = sel.inter_idx[0].len();
    let layers = w
        .layers
        .iter()
        .zip(&sel.inter_idx)
        .map(|(l, i)| LayerWeights {
            attn_norm: gather(&l.attn_norm, None, Some(h)),
            wq: gather(&l.wq, Some(h), None),
            wk: gather(&l.wk, Some(h), None),
            wv: gather(&l.wv, Some(h), None),
            wo: gather(&l.wo, None, Some(h)),
            ffn_norm: gather(&l.ffn_norm, None, Some(h)),
            w_gate: gather(&l.w_gate, Some(h), Some(i)),
            w_up: gather(&l.w_up, Some(h), Some(i)),
            w_down: gather(&l.w_down, Some(i), Some(h)),
        })
        .collect();
    let pruned = Weights {
        config: cfg.clone(),
        token_embedding: gather(&w.token_embedding, None, Some(h)),
        layers,
        final_norm: gather(&w.final_norm, None, Some(h)),
        lm_head: w.lm_head.as_ref().map(|t| gather(t, Some(h), None)),
        frozen: false,
    };
    Ok((pruned, cfg))
}

/// Calibrate, score, select and slice in one go.
pub fn prune<T: Real>(
    w: &Weights<T>,
    calib: &[Vec<Vec<u32>>],
    cfg: &PruneConfig,
) -> Result<(Weights<T>, ChannelSelection)> {
    let (d, i) = compute_pruned_dims(w.config.hidden_dim, w.config.intermediate_dim, cfg)?;
    let stats = collect_activations(w, calib)?;
    let scores = score_channels(&stats)?;
    let mut sel = select_channels(&scores, d, i)?;
    sel.provenance = Some(Provenance {
        calib_seed: 0,
        p_hidden: cfg.p_hidden,
        p_intermediate: cfg.p_intermediate,
    });
    let (pruned, _) = slice_model(w, &sel, &w.config)?;
    Ok((pruned, sel))
}
