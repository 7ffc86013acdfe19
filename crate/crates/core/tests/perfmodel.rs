use overfill_core::engine::Mode;
use overfill_core::model::ModelConfig;
use overfill_core::perfmodel::{param_count, roofline_estimate, HardwareSpec};
use overfill_core::pruner::{compute_pruned_dims, PruneConfig};
use proptest::prelude::*;

fn geometry(text: &str) -> ModelConfig {
    serde_json::from_str(text).unwrap()
}

fn llama3b() -> ModelConfig {
    geometry(include_str!("../../../ref/llama3b.json"))
}

fn llama8b() -> ModelConfig {
    geometry(include_str!("../../../ref/llama8b.json"))
}

fn llama1b() -> ModelConfig {
    geometry(include_str!("../../../ref/llama1b.json"))
}

fn pruned(base: &ModelConfig, p: f64) -> ModelConfig {
    let pc = PruneConfig {
        p_hidden: p,
        p_intermediate: p,
        ..PruneConfig::default()
    };
    let (d, i) = compute_pruned_dims(base.hidden_dim, base.intermediate_dim, &pc).unwrap();
    ModelConfig {
        hidden_dim: d,
        intermediate_dim: i,
        ..base.clone()
    }
}

fn within(count: u64, billions: f64, tol: f64) -> bool {
    (count as f64 / 1e9 - billions).abs() <= tol * billions
}

#[test]
fn released_sizes() {
    assert!(within(param_count(&llama3b()), 3.21, 0.01));
    assert!(within(param_count(&pruned(&llama3b(), 0.45)), 1.24, 0.01));
    assert!(within(param_count(&pruned(&llama3b(), 0.7)), 0.52, 0.01));
    assert!(within(param_count(&pruned(&llama3b(), 0.25)), 2.01, 0.01));
    assert!(within(param_count(&llama8b()), 8.03, 0.01));
    assert!(within(param_count(&pruned(&llama8b(), 0.43)), 3.19, 0.01));
    assert!(within(param_count(&llama1b()), 1.24, 0.01));
}

#[test]
fn overhead_versus_small_model_at_long_generation() {
    let hw = HardwareSpec::accelerator();
    let (full, small) = (llama3b(), llama1b());
    let o = roofline_estimate(&hw, &full, &small, 128, 4096, 4, Mode::Overfill).unwrap();
    let p = roofline_estimate(&hw, &full, &small, 128, 4096, 4, Mode::Pruned).unwrap();
    assert!(o.total_s / p.total_s < 1.10);
    assert!(o.total_s > p.total_s);
}

#[test]
fn phases_depend_on_their_own_model() {
    let hw = HardwareSpec::accelerator();
    let full = llama3b();
    let a = pruned(&full, 0.45);
    let b = pruned(&full, 0.25);
    let oa = roofline_estimate(&hw, &full, &a, 64, 100, 2, Mode::Overfill).unwrap();
    let ob = roofline_estimate(&hw, &full, &b, 64, 100, 2, Mode::Overfill).unwrap();
    let fa = roofline_estimate(&hw, &full, &a, 64, 100, 2, Mode::Full).unwrap();
    let pa = roofline_estimate(&hw, &full, &a, 64, 100, 2, Mode::Pruned).unwrap();
    assert_eq!(oa.prefill_s, ob.prefill_s);
    assert_eq!(oa.prefill_s, fa.prefill_s);
    assert_eq!(oa.decode_s, pa.decode_s);
    assert_ne!(oa.decode_s, ob.decode_s);
}

#[test]
fn large_batches_become_compute_bound() {
    let hw = HardwareSpec::accelerator();
    let c = llama3b();
    let small = roofline_estimate(&hw, &c, &c, 16, 64, 1, Mode::Full).unwrap();
    let big = roofline_estimate(&hw, &c, &c, 16, 64, 1024, Mode::Full).unwrap();
    // memory-bound: per-request decode time barely moves with batch
    let big_mem = roofline_estimate(&hw, &c, &c, 16, 64, 2, Mode::Full).unwrap();
    assert_eq!(small.decode_s, big_mem.decode_s);
    assert!(big.decode_s > 2.0 * small.decode_s);
}

proptest! {
    #[test]
    fn overhead_ratio_falls_toward_one(m in 1usize..512, batch in 1usize..64, p in 0.1f64..0.8, secondary in any::<bool>()) {
        let hw = HardwareSpec { secondary_terms: secondary, ..HardwareSpec::accelerator() };
        let full = llama3b();
        let small = pruned(&full, p);
        let ratio = |n: usize| {
            let o = roofline_estimate(&hw, &full, &small, m, n, batch, Mode::Overfill).unwrap();
            let s = roofline_estimate(&hw, &full, &small, m, n, batch, Mode::Pruned).unwrap();
            o.total_s / s.total_s
        };
        let mut prev = ratio(1);
        prop_assert!(prev > 1.0);
        for n in [2, 4, 16, 64, 256, 1024, 4096] {
            let r = ratio(n);
            prop_assert!(r < prev && r > 1.0, "n {}: {} then {}", n, prev, r);
            prev = r;
        }
    }

    #[test]
    fn no_generation_means_full_cost(m in 1usize..512, batch in 1usize..64) {
        let hw = HardwareSpec::desk_cpu();
        let full = llama3b();
        let small = pruned(&full, 0.5);
        let o = roofline_estimate(&hw, &full, &small, m, 0, batch, Mode::Overfill).unwrap();
        let f = roofline_estimate(&hw, &full, &small, m, 0, batch, Mode::Full).unwrap();
        prop_assert_eq!(o.total_s / f.total_s, 1.0);
    }
}
