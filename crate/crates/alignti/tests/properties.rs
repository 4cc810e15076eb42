//! Property tests for the numeric core and layout invariants.

use proptest::prelude::*;

use alignti::losses::{build_ribbon_layout, StepCandidates};
use alignti::numerics::{kl_divergence, softmax, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-30.0f64..30.0, 1..24)) {
        let t = Tensor::from_vec(logits);
        let s = softmax(&t).unwrap();
        let sum: f64 = s.data.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(s.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_shift_invariant(
        logits in prop::collection::vec(-10.0f64..10.0, 2..12),
        shift in -100.0f64..100.0,
    ) {
        let base = softmax(&Tensor::from_vec(logits.clone())).unwrap();
        let shifted =
            softmax(&Tensor::from_vec(logits.iter().map(|x| x + shift).collect())).unwrap();
        for (a, b) in base.data.iter().zip(&shifted.data) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(
        p in prop::collection::vec(-8.0f64..8.0, 2..16),
        q in prop::collection::vec(-8.0f64..8.0, 2..16),
    ) {
        let pt = Tensor::from_vec(p.clone());
        prop_assert!(kl_divergence(&pt, &pt).unwrap().abs() <= 1e-12);
        if p.len() == q.len() {
            let qt = Tensor::from_vec(q);
            prop_assert!(kl_divergence(&pt, &qt).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn ribbon_layout_invariants_hold(l in 1usize..7, d in 0usize..5) {
        let response: Vec<u32> = (10..10 + l as u32).collect();
        let candidates: Vec<StepCandidates> = (0..l)
            .map(|k| StepCandidates {
                tokens: (0..d).map(|u| (30 + k * d + u) as u32).collect(),
                probs: vec![1.0 / (d.max(1) as f64); d],
            })
            .collect();
        let layout = build_ribbon_layout(5, 3, &response, &candidates).unwrap();
        prop_assert!(layout.check_invariants().is_ok());
        prop_assert_eq!(layout.len(), l * (1 + d));
        // Backbone sub-mask is strict causal.
        for (i, &qi) in layout.kd_eval_positions.iter().enumerate() {
            for (j, &kj) in layout.kd_eval_positions.iter().enumerate() {
                prop_assert_eq!(layout.allowed(qi, kj), j <= i);
            }
        }
    }
}

/// Dataset serialization round-trips bit-exactly for arbitrary spec seeds.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_roundtrip(seed in 0u64..1000) {
        use alignti::synthdata::{generate_dataset, io, TaskSpec};
        let spec = TaskSpec { seed, response_len_range: (5, 20), ..TaskSpec::default() };
        let records = generate_dataset(&spec, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        io::save_dataset(&path, &spec, &records).unwrap();
        let (spec2, records2) = io::load_dataset(&path).unwrap();
        prop_assert_eq!(spec, spec2);
        prop_assert_eq!(records, records2);
    }
}
