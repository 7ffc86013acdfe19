//! Llama-style decoder with batched prefill and single-token decode over a
//! KV cache whose geometry never depends on the hidden or FFN width.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttnShape, KvPrefix, Segment};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub intermediate_dim: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// Byte-level desk-scale model that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            vocab_size: 260,
            hidden_dim: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            intermediate_dim: 256,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
            tied_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("intermediate_dim", self.intermediate_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!("head_dim {} must be even", self.head_dim)));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("norm_eps {} invalid", self.norm_eps)));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::InvalidConfig(format!("rope_theta {} invalid", self.rope_theta)));
        }
        Ok(())
    }

    /// Query/output projection width `n_heads · head_dim`.
    pub fn attn_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn attn_shape(&self) -> AttnShape {
        AttnShape {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
        }
    }
}

/// `(layers, kv_heads, head_dim)` of the per-position cache entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheShape {
    pub layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl CacheShape {
    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.layers, self.kv_heads, self.head_dim)
    }
}

pub fn cache_shape(config: &ModelConfig) -> CacheShape {
    CacheShape {
        layers: config.n_layers,
        kv_heads: config.n_kv_heads,
        head_dim: config.head_dim,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T> LayerWeights<T> {
    const NAMES: [&'static str; 9] = [
        "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
    ];

    fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// All learnable tensors of one model. Projections are stored input-major,
/// so a layer computes `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T = f32> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
    /// `None` when the head is tied to the token embedding.
    pub lm_head: Option<Tensor<T>>,
    pub frozen: bool,
}

impl<T: Real> Weights<T> {
    /// Tensors in canonical order with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![(String::from("tok_embeddings"), &self.token_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::<T>::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push((String::from("norm"), &self.final_norm));
        if let Some(head) = &self.lm_head {
            out.push((String::from("lm_head"), head));
        }
        out
    }

    /// Same order as [`Weights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        if let Some(head) = &mut self.lm_head {
            out.push(head);
        }
        out
    }

    /// Expected shape of every named tensor for `config`.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, i) = (config.hidden_dim, config.intermediate_dim);
        let mut out = vec![(String::from("tok_embeddings"), vec![config.vocab_size, d])];
        for l in 0..config.n_layers {
            let shapes = [
                vec![d],
                vec![d, config.attn_dim()],
                vec![d, config.kv_dim()],
                vec![d, config.kv_dim()],
                vec![config.attn_dim(), d],
                vec![d],
                vec![d, i],
                vec![d, i],
                vec![i, d],
            ];
            for (name, s) in LayerWeights::<T>::NAMES.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), s));
            }
        }
        out.push((String::from("norm"), vec![d]));
        if !config.tied_embeddings {
            out.push((String::from("lm_head"), vec![d, config.vocab_size]));
        }
        out
    }

    /// Rebuilds weights from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
            let _ = name;
        }
        let mut it = tensors.into_iter();
        let token_embedding = it.next().unwrap();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut n = || it.next().unwrap();
            layers.push(LayerWeights {
                attn_norm: n(),
                wq: n(),
                wk: n(),
                wv: n(),
                wo: n(),
                ffn_norm: n(),
                w_gate: n(),
                w_up: n(),
                w_down: n(),
            });
        }
        let final_norm = it.next().unwrap();
        let lm_head = it.next();
        Ok(Self {
            config,
            token_embedding,
            layers,
            final_norm,
            lm_head,
            frozen,
        })
    }

    /// Number of scalar parameters actually allocated.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let tensors = self.named_tensors().into_iter().map(|(_, t)| t.cast()).collect();
        Weights::from_tensors(self.config.clone(), tensors, self.frozen).expect("same shapes")
    }

    pub fn cache_shape(&self) -> CacheShape {
        cache_shape(&self.config)
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> WeightVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embedding = put(&self.token_embedding);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: put(&l.attn_norm),
                wq: put(&l.wq),
                wk: put(&l.wk),
                wv: put(&l.wv),
                wo: put(&l.wo),
                ffn_norm: put(&l.ffn_norm),
                w_gate: put(&l.w_gate),
                w_up: put(&l.w_up),
                w_down: put(&l.w_down),
            })
            .collect();
        let final_norm = put(&self.final_norm);
        let lm_head = self.lm_head.as_ref().map(&mut put);
        WeightVars {
            embedding,
            layers,
            final_norm,
            lm_head,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Tape handles for one [`Weights`], in canonical order.
#[derive(Clone, Debug)]
pub struct WeightVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Option<Var>,
}

impl WeightVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.extend(self.lm_head);
        out
    }
}

/// Deterministic scaled-normal initialization.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Weights<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f32, 0.02).expect("valid std");
    let out_std = 0.02 / libm::sqrt(2.0 * config.n_layers as f64);
    let out = Normal::new(0.0f32, out_std as f32).expect("valid std");
    let tensors = Weights::<f32>::expected_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with("norm") {
                Tensor::ones(shape)
            } else if name.ends_with(".wo") || name.ends_with(".w_down") {
                Tensor::from_fn(shape, |_| out.sample(&mut rng))
            } else {
                Tensor::from_fn(shape, |_| base.sample(&mut rng))
            }
        })
        .collect();
    Weights::from_tensors(config.clone(), tensors, false)
}

/// Per-position key/value store for every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache<T = f32> {
    shape: CacheShape,
    layers: Vec<KvPrefix<T>>,
}

impl<T: Real> KVCache<T> {
    pub fn new(shape: CacheShape) -> Self {
        Self {
            shape,
            layers: (0..shape.layers).map(|_| KvPrefix::empty()).collect(),
        }
    }

    pub fn for_config(config: &ModelConfig) -> Self {
        Self::new(cache_shape(config))
    }

    pub fn shape(&self) -> CacheShape {
        self.shape
    }

    pub fn filled_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.filled_len() == 0
    }

    /// Keys and values of one layer, each `[filled_len × kv_heads × head_dim]` flattened.
    pub fn layer(&self, l: usize) -> &KvPrefix<T> {
        &self.layers[l]
    }

    fn append(&mut self, layer: usize, keys: &[T], values: &[T], rows: usize) {
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(keys);
        l.values.extend_from_slice(values);
        l.len += rows;
    }

    fn check_model(&self, config: &ModelConfig) -> Result<()> {
        let model = cache_shape(config);
        if model != self.shape {
            return Err(Error::GeometryMismatch {
                model: model.as_tuple(),
                cache: self.shape.as_tuple(),
            });
        }
        Ok(())
    }
}

/// Activations captured at the three channel-importance hook points of a layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerTaps {
    /// Input to the attention projections (after the attention norm).
    pub pre_attn: Var,
    /// Input to the FFN (after the FFN norm).
    pub pre_ffn: Var,
    /// Gated FFN activation feeding the down projection.
    pub ffn_inner: Var,
}

pub struct PassOutput {
    /// Final-norm output, `[rows × hidden]`.
    pub hidden: Var,
    /// Roped keys per layer, `[rows × kv_dim]`.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub taps: Vec<LayerTaps>,
}

/// One packed forward pass. Segment `s` covers `segments[s]` rows of `tokens`
/// and continues from `prefixes[l][s]` in layer `l`, so its first row sits at
/// absolute position `prefixes[0][s].len`.
pub fn run_pass<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    wv: &WeightVars,
    tokens: &[u32],
    segments: &[Segment],
    prefixes: Vec<Vec<KvPrefix<T>>>,
) -> Result<PassOutput> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("tokens"));
    }
    if prefixes.len() != config.n_layers {
        return Err(Error::InvalidConfig(format!(
            "{} prefix layers for a {}-layer model",
            prefixes.len(),
            config.n_layers
        )));
    }
    let mut positions = Vec::with_capacity(tokens.len());
    for (s, seg) in segments.iter().enumerate() {
        let base = prefixes[0][s].len;
        positions.extend((0..seg.len).map(|r| base + r));
    }
    if positions.len() != tokens.len() {
        return Err(Error::InvalidConfig(format!(
            "segments cover {} of {} tokens",
            positions.len(),
            tokens.len()
        )));
    }
    let shape = config.attn_shape();
    let eps = config.norm_eps;
    let mut x = tape.embedding(wv.embedding, tokens)?;
    let mut keys = Vec::with_capacity(config.n_layers);
    let mut values = Vec::with_capacity(config.n_layers);
    let mut taps = Vec::with_capacity(config.n_layers);
    for (lv, layer_prefixes) in wv.layers.iter().zip(prefixes) {
        let a = tape.rms_norm(x, lv.attn_norm, eps)?;
        let q = tape.matmul(a, lv.wq)?;
        let k = tape.matmul(a, lv.wk)?;
        let v = tape.matmul(a, lv.wv)?;
        let q = tape.rope(q, config.head_dim, positions.clone(), config.rope_theta)?;
        let k = tape.rope(k, config.head_dim, positions.clone(), config.rope_theta)?;
        let o = tape.attention(q, k, v, shape, segments.to_vec(), layer_prefixes)?;
        let o = tape.matmul(o, lv.wo)?;
        x = tape.add(x, o)?;
        let f = tape.rms_norm(x, lv.ffn_norm, eps)?;
        let g = tape.matmul(f, lv.w_gate)?;
        let u = tape.matmul(f, lv.w_up)?;
        let m = tape.swiglu(g, u)?;
        let d = tape.matmul(m, lv.w_down)?;
        x = tape.add(x, d)?;
        keys.push(k);
        values.push(v);
        taps.push(LayerTaps {
            pre_attn: a,
            pre_ffn: f,
            ffn_inner: m,
        });
    }
    let hidden = tape.rms_norm(x, wv.final_norm, eps)?;
    Ok(PassOutput {
        hidden,
        keys,
        values,
        taps,
    })
}

/// Projects hidden rows onto the vocabulary.
pub fn lm_logits<T: Real>(tape: &mut Tape<T>, wv: &WeightVars, hidden: Var) -> Result<Var> {
    match wv.lm_head {
        Some(head) => tape.matmul(hidden, head),
        None => tape.matmul_nt(hidden, wv.embedding),
    }
}

/// Runs `tokens` on top of `cache`, appending their keys/values, and returns
/// the final-norm hidden rows and the logits of every row, `[n × vocab]`.
pub fn extend<T: Real>(w: &Weights<T>, tokens: &[u32], cache: &mut KVCache<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    cache.check_model(&w.config)?;
    let mut tape = Tape::new();
    let wv = w.record(&mut tape, false);
    let prefixes = cache.layers.iter().map(|l| vec![l.clone()]).collect();
    let segments = [Segment {
        start: 0,
        len: tokens.len(),
    }];
    let out = run_pass(&mut tape, &w.config, &wv, tokens, &segments, prefixes)?;
    let logits = lm_logits(&mut tape, &wv, out.hidden)?;
    for (l, (k, v)) in out.keys.iter().zip(&out.values).enumerate() {
        cache.append(l, tape.value(*k).data(), tape.value(*v).data(), tokens.len());
    }
    Ok((tape.value(out.hidden).clone(), tape.value(logits).clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prefill<T = f32> {
    /// Final-norm hidden state of the last prompt position, `[hidden]`.
    pub last_hidden: Tensor<T>,
    /// Logits of the last prompt position, `[vocab]`.
    pub logits_last: Tensor<T>,
}

/// Processes a whole prompt in parallel into an empty cache.
pub fn forward_prefill<T: Real>(w: &Weights<T>, tokens: &[u32], cache: &mut KVCache<T>) -> Result<Prefill<T>> {
    if !cache.is_empty() {
        return Err(Error::CacheNotEmpty(cache.filled_len()));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let (hidden, logits) = extend(w, tokens, cache)?;
    let last = tokens.len() - 1;
    Ok(Prefill {
        last_hidden: Tensor::new([hidden.cols()], hidden.row(last).to_vec())?,
        logits_last: Tensor::new([logits.cols()], logits.row(last).to_vec())?,
    })
}

/// Decodes one token at `position`, which must equal the cache length.
pub fn decode_step<T: Real>(w: &Weights<T>, token: u32, cache: &mut KVCache<T>, position: usize) -> Result<Tensor<T>> {
    cache.check_model(&w.config)?;
    if position != cache.filled_len() {
        return Err(Error::PositionMismatch {
            position,
            filled: cache.filled_len(),
        });
    }
    let (_, logits) = extend(w, &[token], cache)?;
    logits.reshape([w.config.vocab_size])
}

/// Logits at every position of `tokens` from a fresh cache, `[n × vocab]`.
pub fn forward_logits<T: Real>(w: &Weights<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    let mut cache = KVCache::for_config(&w.config);
    Ok(extend(w, tokens, &mut cache)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            hidden_dim: 8,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            intermediate_dim: 12,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
            tied_embeddings: true,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::desk();
        let a = init_model(&cfg, 1).unwrap();
        assert_eq!(a, init_model(&cfg, 1).unwrap());
        let b = init_model(&cfg, 2).unwrap();
        assert_ne!(a.token_embedding, b.token_embedding);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny();
        cfg.n_kv_heads = 3;
        assert!(matches!(init_model(&cfg, 0), Err(Error::InvalidConfig(_))));
        let mut cfg = tiny();
        cfg.hidden_dim = 0;
        assert!(matches!(init_model(&cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn prefill_rejects_bad_inputs() {
        let w = init_model(&tiny(), 3).unwrap();
        let mut cache = KVCache::for_config(&w.config);
        assert_eq!(
            forward_prefill(&w, &[1, 25], &mut cache).unwrap_err(),
            Error::TokenOutOfRange { id: 25, vocab: 20 }
        );
        let mut cache = KVCache::for_config(&w.config);
        let p = forward_prefill(&w, &[4], &mut cache).unwrap();
        assert_eq!(cache.filled_len(), 1);
        assert_eq!(p.logits_last.shape(), &[20]);
        assert_eq!(forward_prefill(&w, &[4], &mut cache).unwrap_err(), Error::CacheNotEmpty(1));
        assert_eq!(
            decode_step(&w, 3, &mut cache, 5).unwrap_err(),
            Error::PositionMismatch { position: 5, filled: 1 }
        );
    }

    #[test]
    fn layer_count_mismatch_rejected() {
        let w = init_model(&tiny(), 3).unwrap();
        let mut other = tiny();
        other.n_layers = 3;
        let mut cache = KVCache::<f32>::for_config(&other);
        assert!(matches!(
            decode_step(&w, 1, &mut cache, 0),
            Err(Error::GeometryMismatch { .. })
        ));
    }

    #[test]
    fn cache_shape_ignores_widths() {
        let cfg = tiny();
        let mut wide = cfg.clone();
        wide.hidden_dim = 40;
        wide.intermediate_dim = 7;
        assert_eq!(cache_shape(&cfg), cache_shape(&wide));
        assert_eq!(cache_shape(&cfg).as_tuple(), (2, 1, 4));
    }
}
