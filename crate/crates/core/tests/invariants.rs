use proptest::prelude::*;

use tauflow::accounting::{count_params, estimate_flops};
use tauflow::checkpoint::Checkpoint;
use tauflow::config::ModelConfig;
use tauflow::grouping::{groups_for_score, GroupPlan};
use tauflow::metrics::{dice_iou, hd95, BinaryMask};
use tauflow::model::TauFlowNet;
use tauflow::optim::lr_at;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::weighted(0.3), h * w).prop_map(move |cells| BinaryMask::new(h, w, cells).unwrap())
}

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 2usize..7, 2usize..4).prop_map(|(base, max_groups, time_steps)| ModelConfig {
        input_size: 16,
        base_channel: 4 * base,
        hidden_channels: 8,
        group_embed_dim: 4,
        norm_groups: 2,
        complexity_hidden: 4,
        fast_head_channels: 2,
        qk_dim: 3,
        max_groups,
        time_steps,
        ..ModelConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn learning_rate_stays_in_band_and_restarts_at_the_top(
        epoch in 0.0f64..500.0,
        base in 1e-5f64..1e-1,
        t0 in 1usize..20,
        t_mult in 1usize..4,
    ) {
        let eta_min = base * 0.01;
        let lr = lr_at(epoch, base, t0, t_mult, eta_min);
        prop_assert!(lr >= eta_min - 1e-15 && lr <= base + 1e-15);

        // Each cycle starts at the base rate and decays monotonically.
        let mut start = 0usize;
        let mut len = t0;
        while start + len <= epoch as usize {
            start += len;
            len *= t_mult.max(1);
        }
        prop_assert!((lr_at(start as f64, base, t0, t_mult, eta_min) - base).abs() <= 1e-12 * base);
        let later = (epoch + 1e-3).min(start as f64 + len as f64 - 1e-6);
        if later > epoch {
            prop_assert!(lr_at(later, base, t0, t_mult, eta_min) <= lr + 1e-15);
        }
    }

    #[test]
    fn flops_grow_with_active_groups(cfg in small_config(), size in (1usize..5).prop_map(|k| 16 * k)) {
        let mut prev = 0;
        for g in 1..=cfg.max_groups {
            let f = estimate_flops(&cfg, size, g).unwrap();
            prop_assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn parameter_count_ignores_resolution(cfg in small_config()) {
        let total: u64 = count_params(&cfg).values().sum();
        let wider = ModelConfig { input_size: 64, ..cfg.clone() };
        prop_assert_eq!(total, count_params(&wider).values().sum::<u64>());
        let (_, store) = TauFlowNet::build::<f32>(&cfg, 3).unwrap();
        prop_assert_eq!(total, store.element_count() as u64);
    }

    #[test]
    fn group_count_is_monotone_in_complexity(a in 0.0f64..=1.0, b in 0.0f64..=1.0, g_max in 1usize..8) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(groups_for_score(lo, g_max) <= groups_for_score(hi, g_max));
        prop_assert!((1..=g_max).contains(&groups_for_score(hi, g_max)));
        let plan = GroupPlan::from_scores(vec![lo, hi], g_max);
        prop_assert_eq!(plan.active_groups, groups_for_score(hi, g_max));
    }

    #[test]
    fn hd95_is_symmetric_and_zero_on_identity(a in mask_strategy(12, 12), b in mask_strategy(12, 12)) {
        let ab = hd95(&a, &b).unwrap();
        let ba = hd95(&b, &a).unwrap();
        prop_assert_eq!(ab.value.to_bits(), ba.value.to_bits());
        let aa = hd95(&a, &a).unwrap();
        prop_assert!(aa.empty || aa.value == 0.0);
        let (dice, iou) = dice_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&dice) && iou <= dice);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(cfg in small_config(), seed in any::<u64>()) {
        let (_, store) = TauFlowNet::build::<f32>(&cfg, seed).unwrap();
        let bytes = Checkpoint::from_store(&cfg, &store).encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back.config, &cfg);
        let (_, restored) = back.into_model().unwrap();
        let bits = |s: &tauflow::nn::ParamStore<f32>| {
            s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())).collect::<Vec<_>>()
        };
        prop_assert_eq!(bits(&store), bits(&restored));
    }

    #[test]
    fn checkpoint_payload_corruption_is_detected(cfg in small_config(), pos in any::<prop::sample::Index>()) {
        let (_, store) = TauFlowNet::build::<f32>(&cfg, 1).unwrap();
        let mut bytes = Checkpoint::from_store(&cfg, &store).encode();
        // The payload is the trailing block of f32 values.
        let payload = store.element_count() * 4;
        let at = bytes.len() - payload + pos.index(payload);
        bytes[at] ^= 0x10;
        prop_assert!(Checkpoint::decode(&bytes).is_err());
    }
}
