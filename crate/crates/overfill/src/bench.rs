//! Wall-clock timing of the prefill and decode phases of this implementation.

use std::time::Instant;

use overfill_core::engine::{GenParams, GenSession, Mode};
use overfill_core::model::Weights;
use overfill_core::perfmodel::CostReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct WallClock {
    /// Means over the timed repeats.
    pub report: CostReport,
    pub prefill_sd: f64,
    pub decode_sd: f64,
    pub total_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn run_once(full: &Weights, pruned: &Weights, prompts: &[Vec<u32>], n: usize, mode: Mode) -> Result<(f64, f64)> {
    let params = GenParams {
        max_new_tokens: n,
        temperature: 0.0,
        seed: 0,
        stop_token: u32::MAX,
        first_token_from_full: false,
    };
    let (pre, dec) = match mode {
        Mode::Full => (full, full),
        Mode::Pruned => (pruned, pruned),
        Mode::Overfill => (full, pruned),
    };
    let t0 = Instant::now();
    let mut sessions = prompts
        .iter()
        .map(|p| GenSession::start(mode, pre, dec, p, &params))
        .collect::<overfill_core::Result<Vec<_>>>()?;
    let t1 = Instant::now();
    for s in &mut sessions {
        while s.next_token(dec)?.is_some() {}
    }
    let t2 = Instant::now();
    Ok(((t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64()))
}

/// Times `batch` requests of prompt length `m` generating `n` tokens in each
/// of `modes`. Repeats are interleaved across modes so slow drift of the
/// machine affects all modes alike.
#[allow(clippy::too_many_arguments)]
pub fn bench_wallclock(
    full: &Weights,
    pruned: &Weights,
    m: usize,
    n: usize,
    batch: usize,
    modes: &[Mode],
    repeats: usize,
    warmups: usize,
) -> Result<Vec<WallClock>> {
    let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
    let vocab = full.config.vocab_size as u32;
    let prompts: Vec<Vec<u32>> = (0..batch)
        .map(|_| (0..m).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let mut times = vec![Vec::with_capacity(repeats); modes.len()];
    for rep in 0..warmups + repeats {
        for (i, &mode) in modes.iter().enumerate() {
            let t = run_once(full, pruned, &prompts, n, mode)?;
            if rep >= warmups {
                times[i].push(t);
            }
        }
    }
    Ok(modes
        .iter()
        .zip(times)
        .map(|(&mode, t)| {
            let pre: Vec<f64> = t.iter().map(|x| x.0).collect();
            let dec: Vec<f64> = t.iter().map(|x| x.1).collect();
            let tot: Vec<f64> = t.iter().map(|x| x.0 + x.1).collect();
            let ((p, psd), (d, dsd), (tt, tsd)) = (mean_sd(&pre), mean_sd(&dec), mean_sd(&tot));
            let params = match mode {
                Mode::Pruned => pruned.param_count(),
                _ => full.param_count(),
            } as u64;
            WallClock {
                report: CostReport {
                    mode,
                    m,
                    n,
                    batch,
                    prefill_s: p,
                    decode_s: d,
                    total_s: tt,
                    params,
                },
                prefill_sd: psd,
                decode_sd: dsd,
                total_sd: tsd,
            }
        })
        .collect())
}
