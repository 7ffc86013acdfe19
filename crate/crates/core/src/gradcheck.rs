//! Central finite-difference checks of the reverse-mode gradients, in f64.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnShape, KvPrefix, Segment};
use crate::autograd::{Tape, Var};
use crate::corpus::{format_chat, gen_tasks, TaskKind, Tokenizer};
use crate::error::Result;
use crate::model::{init_model, ModelConfig, Weights};
use crate::pruner::{slice_model, top_k, ChannelSelection};
use crate::tensor::Tensor;
use crate::trainer::{loss_and_grads, TrainBatch};

const STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    let scale = libm::sqrt(na.max(nb));
    if scale == 0.0 {
        0.0
    } else {
        libm::sqrt(diff) / scale
    }
}

/// Numeric gradient of `f` with respect to every element of every input.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let up = f(&work)?;
            work[i].data_mut()[j] = x - STEP;
            let down = f(&work)?;
            work[i].data_mut()[j] = x;
            g.data_mut()[j] = (up - down) / (2.0 * STEP);
        }
        out.push(g);
    }
    Ok(out)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Builds `op` on fresh params, reduces it by a fixed random projection and
/// compares tape gradients with finite differences.
fn check_op<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, op: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let shape = tape.value(out).shape();
        (shape.len() == 2).then(|| random(rng, &[shape[1], 1]))
    };
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let loss = match &probe {
            Some(p) => {
                let r = tape.constant(p.clone());
                let proj = tape.matmul(out, r)?;
                tape.sum(proj)
            }
            None => out,
        };
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = eval(&inputs)?;
    let analytic = tape.grad_of(loss, &vars)?;
    let numeric = central_difference(
        |v| {
            let (t, l, _) = eval(v)?;
            Ok(t.value(l).data()[0])
        },
        &inputs,
    )?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .fold(0.0, f64::max))
}

/// Worst relative error of each differentiable op.
pub fn op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let x = vec![random(r, &[3, 4]), random(r, &[4, 5])];
    out.push(("matmul", check_op(r, x, |t, v| t.matmul(v[0], v[1]))?));

    let x = vec![random(r, &[3, 4]), random(r, &[5, 4])];
    out.push(("matmul_nt", check_op(r, x, |t, v| t.matmul_nt(v[0], v[1]))?));

    let x = vec![random(r, &[3, 4]), random(r, &[3, 4])];
    out.push(("add", check_op(r, x, |t, v| t.add(v[0], v[1]))?));

    let x = vec![random(r, &[3, 4])];
    out.push(("sum", check_op(r, x, |t, v| Ok(t.sum(v[0])))?));

    let x = vec![random(r, &[3, 5])];
    out.push(("softmax_rows", check_op(r, x, |t, v| Ok(t.softmax_rows(v[0])))?));

    let x = vec![random(r, &[3, 4]), random(r, &[4])];
    out.push(("rms_norm", check_op(r, x, |t, v| t.rms_norm(v[0], v[1], 1e-5))?));

    let x = vec![random(r, &[3, 8])];
    out.push(("rope", check_op(r, x, |t, v| t.rope(v[0], 4, vec![0, 3, 7], 10000.0))?));

    let x = vec![random(r, &[3, 4]), random(r, &[3, 4])];
    out.push(("swiglu", check_op(r, x, |t, v| t.swiglu(v[0], v[1]))?));

    let x = vec![random(r, &[6, 4])];
    out.push(("embedding", check_op(r, x, |t, v| t.embedding(v[0], &[1, 5, 1]))?));

    // two query heads sharing one kv head, second segment behind a constant prefix
    let shape = AttnShape {
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 4,
    };
    let prefix = KvPrefix {
        keys: random(r, &[3, 4]).into_data(),
        values: random(r, &[3, 4]).into_data(),
        len: 3,
    };
    let x = vec![random(r, &[5, 8]), random(r, &[5, 4]), random(r, &[5, 4])];
    out.push((
        "attention",
        check_op(r, x, |t, v| {
            t.attention(
                v[0],
                v[1],
                v[2],
                shape,
                vec![Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }],
                vec![KvPrefix::empty(), prefix.clone()],
            )
        })?,
    ));

    let x = vec![random(r, &[4, 6])];
    out.push((
        "cross_entropy",
        check_op(r, x, |t, v| t.cross_entropy(v[0], &[2, 0, 5, 1], &[true, false, true, true]))?,
    ));
    Ok(out)
}

/// Configuration used by the end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: crate::corpus::VOCAB_SIZE,
        hidden_dim: 8,
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 4,
        intermediate_dim: 12,
        norm_eps: 1e-5,
        rope_theta: 10000.0,
        tied_embeddings: false,
    }
}

/// Relative error of the masked response loss gradient of a pruned decoder
/// reading a frozen full-model cache, over every decoder parameter.
pub fn end_to_end_error(seed: u64) -> Result<f64> {
    let mut cfg = tiny_config();
    cfg.tied_embeddings = seed % 2 == 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // larger than default init so the loss surface is not nearly flat
    let mut full: Weights<f64> = init_model(&cfg, seed)?.cast();
    for t in full.tensors_mut() {
        for x in t.data_mut() {
            *x = *x * 10.0 + rng.random_range(-0.1..0.1);
        }
    }
    let hidden: Vec<f64> = (0..cfg.hidden_dim).map(|_| rng.random()).collect();
    let sel = ChannelSelection {
        hidden_idx: top_k(&hidden, 6),
        inter_idx: (0..cfg.n_layers)
            .map(|_| {
                let s: Vec<f64> = (0..cfg.intermediate_dim).map(|_| rng.random()).collect();
                top_k(&s, 8)
            })
            .collect(),
        provenance: None,
    };
    let (pruned, _) = slice_model(&full, &sel, &cfg)?;
    full.frozen = true;

    let tok = Tokenizer;
    let rows: Vec<_> = gen_tasks(TaskKind::Reverse, seed, 2)?
        .iter()
        .map(|e| format_chat(e, &tok))
        .collect();
    let batch = TrainBatch::from_formatted(&rows, 64)?;
    let (_, analytic) = loss_and_grads(Some(&full), &pruned, &batch)?;

    let params: Vec<Tensor<f64>> = pruned.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let numeric = central_difference(
        |values| {
            let w = Weights::from_tensors(pruned.config.clone(), values.to_vec(), false)?;
            Ok(loss_and_grads(Some(&full), &w, &batch)?.0)
        },
        &params,
    )?;
    let a: Vec<f64> = analytic.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n: Vec<f64> = numeric.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(relative_error(&a, &n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_a_cubic() {
        let x = Tensor::new([2], vec![1.5, -2.0]).unwrap();
        let g = central_difference(|v| Ok(v[0].data().iter().map(|a| a * a * a).sum()), &[x]).unwrap();
        assert!((g[0].data()[0] - 6.75).abs() < 1e-8);
        assert!((g[0].data()[1] - 12.0).abs() < 1e-8);
    }
}
