//! Generation: full-model prefill handing its cache to a pruned decoder, plus
//! the single-model baselines.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::model::{cache_shape, decode_step, forward_prefill, KVCache, ModelConfig, Weights};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub max_new_tokens: usize,
    /// 0 selects greedy argmax.
    pub temperature: f64,
    pub seed: u64,
    pub stop_token: u32,
    /// Let the full model emit the first response token from its prefill
    /// logits instead of handing the last prompt token to the decoder.
    #[serde(default)]
    pub first_token_from_full: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            temperature: 0.0,
            seed: 0,
            stop_token: EOS,
            first_token_from_full: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Pruned,
    Overfill,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::Pruned, Mode::Overfill];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Pruned => "pruned",
            Mode::Overfill => "overfill",
        }
    }
}

impl core::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

/// What generation needs from a model. Implemented by [`Weights`]; tests wrap
/// it to count calls.
pub trait Backend<T: Real> {
    fn config(&self) -> &ModelConfig;
    /// Fills an empty cache with `tokens` and returns the last row's logits.
    fn prefill(&self, tokens: &[u32], cache: &mut KVCache<T>) -> Result<Tensor<T>>;
    /// Appends one token at `position` and returns its logits.
    fn step(&self, token: u32, cache: &mut KVCache<T>, position: usize) -> Result<Tensor<T>>;
}

impl<T: Real> Backend<T> for Weights<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn prefill(&self, tokens: &[u32], cache: &mut KVCache<T>) -> Result<Tensor<T>> {
        Ok(forward_prefill(self, tokens, cache)?.logits_last)
    }

    fn step(&self, token: u32, cache: &mut KVCache<T>, position: usize) -> Result<Tensor<T>> {
        decode_step(self, token, cache, position)
    }
}

/// Draws a token. Temperature 0 is argmax with ties to the lowest index;
/// otherwise a categorical draw from `softmax(logits / temperature)`.
pub fn sample<T: Real>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> Result<u32> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::NegativeTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidTensor("non-finite logits".into()));
    }
    let mut best = 0;
    for (i, x) in logits.iter().enumerate() {
        if *x > logits[best] {
            best = i;
        }
    }
    if temperature == 0.0 {
        return Ok(best as u32);
    }
    let top = logits[best].as_f64();
    let weights: Vec<f64> = logits
        .iter()
        .map(|x| libm::exp((x.as_f64() - top) / temperature))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i as u32);
        }
        u -= w;
    }
    // rounding left u past the last bucket
    Ok(weights.iter().rposition(|w| *w > 0.0).unwrap_or(best) as u32)
}

/// State of one in-flight request.
#[derive(Clone, Debug)]
pub struct GenSession<T = f32> {
    pub mode: Mode,
    pub cache: KVCache<T>,
    /// Position the next decoded token will occupy.
    pub position: usize,
    pub emitted: Vec<u32>,
    logits: Option<Tensor<T>>,
    pending: Option<u32>,
    params: GenParams,
    rng: ChaCha8Rng,
    done: bool,
}

fn check_pair(prefill: &ModelConfig, decoder: &ModelConfig) -> Result<()> {
    let (a, b) = (cache_shape(prefill), cache_shape(decoder));
    if a != b {
        return Err(Error::GeometryMismatch {
            model: b.as_tuple(),
            cache: a.as_tuple(),
        });
    }
    if prefill.vocab_size != decoder.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "vocabularies differ: {} vs {}",
            prefill.vocab_size, decoder.vocab_size
        )));
    }
    Ok(())
}

impl<T: Real> GenSession<T> {
    /// Processes the prompt. In overfill mode `prefiller` handles
    /// `x[..M-1]` and `decoder` consumes `x[M-1]`; otherwise `decoder` is
    /// unused until [`GenSession::next_token`] and `prefiller` runs the whole prompt.
    pub fn start<P, D>(mode: Mode, prefiller: &P, decoder: &D, prompt: &[u32], params: &GenParams) -> Result<Self>
    where
        P: Backend<T> + ?Sized,
        D: Backend<T> + ?Sized,
    {
        if params.temperature.is_nan() || params.temperature < 0.0 {
            return Err(Error::NegativeTemperature(params.temperature));
        }
        check_pair(prefiller.config(), decoder.config())?;
        let mut cache = KVCache::for_config(prefiller.config());
        let logits = if mode == Mode::Overfill && !params.first_token_from_full {
            if prompt.len() < 2 {
                return Err(Error::PromptTooShort(prompt.len()));
            }
            let m = prompt.len();
            prefiller.prefill(&prompt[..m - 1], &mut cache)?;
            decoder.step(prompt[m - 1], &mut cache, m - 1)?
        } else {
            if prompt.is_empty() {
                return Err(Error::PromptTooShort(0));
            }
            prefiller.prefill(prompt, &mut cache)?
        };
        Ok(Self {
            mode,
            position: cache.filled_len(),
            cache,
            emitted: Vec::new(),
            logits: Some(logits),
            pending: None,
            params: params.clone(),
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            done: params.max_new_tokens == 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Emits the next token, first feeding the previous one through `decoder`.
    /// Returns `None` once generation has stopped.
    pub fn next_token<D: Backend<T> + ?Sized>(&mut self, decoder: &D) -> Result<Option<u32>> {
        if self.done {
            return Ok(None);
        }
        if let Some(tok) = self.pending.take() {
            self.logits = Some(decoder.step(tok, &mut self.cache, self.position)?);
            self.position += 1;
        }
        let logits = self.logits.take().ok_or(Error::EmptyInput("logits"))?;
        let tok = sample(logits.data(), self.params.temperature, &mut self.rng)?;
        self.emitted.push(tok);
        if tok == self.params.stop_token || self.emitted.len() >= self.params.max_new_tokens {
            self.done = true;
        } else {
            self.pending = Some(tok);
        }
        Ok(Some(tok))
    }

    pub fn run<D: Backend<T> + ?Sized>(mut self, decoder: &D) -> Result<Vec<u32>> {
        while self.next_token(decoder)?.is_some() {}
        Ok(self.emitted)
    }
}

/// Full model prefills the prompt, pruned model decodes the response.
pub fn overfill_generate<T: Real, F, P>(full: &F, pruned: &P, prompt: &[u32], params: &GenParams) -> Result<Vec<u32>>
where
    F: Backend<T> + ?Sized,
    P: Backend<T> + ?Sized,
{
    GenSession::start(Mode::Overfill, full, pruned, prompt, params)?.run(pruned)
}

/// One model does both prefill and decode.
pub fn baseline_generate<T: Real, W: Backend<T> + ?Sized>(w: &W, prompt: &[u32], params: &GenParams) -> Result<Vec<u32>> {
    GenSession::start(Mode::Full, w, w, prompt, params)?.run(w)
}

/// Dispatches on `mode`: `Full` uses `full` only, `Pruned` uses `pruned` only.
pub fn generate<T: Real, F, P>(mode: Mode, full: &F, pruned: &P, prompt: &[u32], params: &GenParams) -> Result<Vec<u32>>
where
    F: Backend<T> + ?Sized,
    P: Backend<T> + ?Sized,
{
    match mode {
        Mode::Full => baseline_generate(full, prompt, params),
        Mode::Pruned => baseline_generate(pruned, prompt, params),
        Mode::Overfill => overfill_generate(full, pruned, prompt, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn greedy_cases() {
        assert_eq!(sample(&[1.0f32, 3.0, 2.0], 0.0, &mut rng()).unwrap(), 1);
        assert_eq!(sample(&[5.0f32, 5.0], 0.0, &mut rng()).unwrap(), 0);
        assert_eq!(
            sample(&[1.0f32], -0.5, &mut rng()).unwrap_err(),
            Error::NegativeTemperature(-0.5)
        );
        assert!(sample(&[f32::NAN], 1.0, &mut rng()).is_err());
    }

    #[test]
    fn monte_carlo_matches_softmax() {
        let logits = [0.0f64, libm::log(3.0)];
        let mut r = rng();
        let n = 100_000;
        let ones = (0..n).filter(|_| sample(&logits, 1.0, &mut r).unwrap() == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "{freq}");
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }
}
