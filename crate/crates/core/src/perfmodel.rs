//! Parameter counts and a roofline latency model: prefill is priced by
//! compute, each decode step by the larger of its memory and compute time.

use serde::{Deserialize, Serialize};

use crate::engine::Mode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Parameters implied by a configuration: embeddings (once if tied), per-layer
/// attention projections, gated FFN and two norms, and the final norm.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let (v, d, i) = (cfg.vocab_size as u64, cfg.hidden_dim as u64, cfg.intermediate_dim as u64);
    let q = (cfg.n_heads * cfg.head_dim) as u64;
    let kv = (cfg.n_kv_heads * cfg.head_dim) as u64;
    let embed = if cfg.tied_embeddings { v * d } else { 2 * v * d };
    let layer = d * q + 2 * d * kv + q * d + 3 * d * i + 2 * d;
    embed + cfg.n_layers as u64 * layer + d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub peak_flops: f64,
    pub mem_bandwidth: f64,
    pub bytes_per_param: f64,
    /// Add attention-score FLOPs and KV-cache reads on top of the weight terms.
    #[serde(default)]
    pub secondary_terms: bool,
}

impl HardwareSpec {
    /// A datacenter accelerator at 16-bit precision.
    pub fn accelerator() -> Self {
        Self {
            peak_flops: 312e12,
            mem_bandwidth: 2.0e12,
            bytes_per_param: 2.0,
            secondary_terms: false,
        }
    }

    /// A single desktop core running f32.
    pub fn desk_cpu() -> Self {
        Self {
            peak_flops: 8e9,
            mem_bandwidth: 2e10,
            bytes_per_param: 4.0,
            secondary_terms: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.peak_flops, self.mem_bandwidth, self.bytes_per_param]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig("hardware figures must be positive".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: Mode,
    pub m: usize,
    pub n: usize,
    pub batch: usize,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    /// Parameters resident for the request (the larger of the two phases).
    pub params: u64,
}

fn attn_width(cfg: &ModelConfig) -> f64 {
    (cfg.n_layers * cfg.n_heads * cfg.head_dim) as f64
}

fn kv_width(cfg: &ModelConfig) -> f64 {
    (cfg.n_layers * cfg.n_kv_heads * cfg.head_dim) as f64
}

fn prefill_time(hw: &HardwareSpec, cfg: &ModelConfig, m: usize, batch: usize) -> f64 {
    let (m, b) = (m as f64, batch as f64);
    let mut flops = 2.0 * param_count(cfg) as f64 * m * b;
    if hw.secondary_terms {
        // QKᵀ and PV over a causal triangle
        flops += 2.0 * attn_width(cfg) * m * (m + 1.0) * b;
    }
    flops / hw.peak_flops
}

fn decode_time(hw: &HardwareSpec, cfg: &ModelConfig, m: usize, n: usize, batch: usize) -> f64 {
    let b = batch as f64;
    let params = param_count(cfg) as f64;
    let weight_bytes = params * hw.bytes_per_param;
    (0..n)
        .map(|t| {
            let ctx = (m + t + 1) as f64;
            let mut bytes = weight_bytes;
            let mut flops = 2.0 * params * b;
            if hw.secondary_terms {
                bytes += 2.0 * kv_width(cfg) * ctx * b * hw.bytes_per_param;
                flops += 4.0 * attn_width(cfg) * ctx * b;
            }
            (bytes / hw.mem_bandwidth).max(flops / hw.peak_flops)
        })
        .sum()
}

/// Estimated latency of one request of `batch` prompts of length `m`
/// generating `n` tokens each.
#[allow(clippy::too_many_arguments)]
pub fn roofline_estimate(
    hw: &HardwareSpec,
    full: &ModelConfig,
    pruned: &ModelConfig,
    m: usize,
    n: usize,
    batch: usize,
    mode: Mode,
) -> Result<CostReport> {
    hw.validate()?;
    if m == 0 || batch == 0 {
        return Err(Error::InvalidConfig("prompt length and batch must be positive".into()));
    }
    let (pre, dec) = match mode {
        Mode::Full => (full, full),
        Mode::Pruned => (pruned, pruned),
        Mode::Overfill => (full, pruned),
    };
    let prefill_s = prefill_time(hw, pre, m, batch);
    let decode_s = decode_time(hw, dec, m, n, batch);
    Ok(CostReport {
        mode,
        m,
        n,
        batch,
        prefill_s,
        decode_s,
        total_s: prefill_s + decode_s,
        params: param_count(pre).max(param_count(dec)),
    })
}
