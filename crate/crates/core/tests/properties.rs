//! Property tests for the invariants that hold for arbitrary inputs.

use proptest::prelude::*;

use tagrpo::align::select_anchors;
use tagrpo::bank::{BankConfig, BankKey, MemoryBank};
use tagrpo::flow_match::{fm_loss_values, interpolate};
use tagrpo::grpo::{clipped_term, compute_advantages};
use tagrpo::task::{reward_composite, RewardSpec, TaskConfig, ToySequence};
use tagrpo::velocity::Condition;

mod common;
use common::synthetic_rollout;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #[test]
    fn interpolation_is_affine_in_t(x0 in vec_of(6), x1 in vec_of(6), t in 0.0..=1.0f64) {
        let xt = interpolate(&x0, &x1, t).unwrap();
        for ((a, b), m) in x0.iter().zip(&x1).zip(&xt) {
            prop_assert!((m - ((1.0 - t) * a + t * b)).abs() < 1e-12);
        }
        prop_assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.clone());
    }

    #[test]
    fn flow_matching_loss_is_nonnegative(pred in vec_of(12), target in vec_of(12)) {
        prop_assert!(fm_loss_values(&pred, &target) >= 0.0);
        prop_assert_eq!(fm_loss_values(&pred, &pred), 0.0);
    }

    #[test]
    fn advantages_are_standardized_and_affine_invariant(
        rewards in prop::collection::vec(-50.0..50.0f64, 2..16),
        a in 0.01..100.0f64,
        b in -100.0..100.0f64,
    ) {
        let adv = compute_advantages(&rewards).unwrap();
        let n = rewards.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-3 {
            let var = adv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
            let moved: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
            let adv2 = compute_advantages(&moved).unwrap();
            for (x, y) in adv.iter().zip(&adv2) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            let an = select_anchors(&rewards, &adv).unwrap();
            let an2 = select_anchors(&moved, &adv2).unwrap();
            prop_assert_eq!((an.pos, an.neg), (an2.pos, an2.neg));
        }
    }

    #[test]
    fn clipped_term_never_exceeds_the_unclipped_one(r in 0.0..3.0f64, adv in -5.0..5.0f64, eps in 0.01..0.5f64) {
        let c = clipped_term(r, adv, eps);
        prop_assert!(c <= r * adv + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&r) {
            prop_assert!((c - r * adv).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_keeps_the_newest_entries_in_order(
        capacity in 1usize..8,
        pushes in prop::collection::vec((0u64..3, -5.0..0.0f64), 0..40),
    ) {
        let mut bank = MemoryBank::new(BankConfig { capacity, staleness: None }).unwrap();
        let mut expected: Vec<Vec<u64>> = vec![Vec::new(); 3];
        for (id, (k, reward)) in pushes.iter().enumerate() {
            let key = BankKey { condition_id: *k, noise_seed: 10 + k };
            bank.push(key, synthetic_rollout(id as u64, key, *reward, 0)).unwrap();
            expected[*k as usize].push(id as u64);
        }
        for k in 0..3u64 {
            let key = BankKey { condition_id: k, noise_seed: 10 + k };
            let want = &expected[k as usize];
            let want = &want[want.len().saturating_sub(capacity)..];
            let got: Vec<u64> = bank.entries(&key).map(|r| r.id).collect();
            prop_assert_eq!(got.as_slice(), want);
        }
    }

    #[test]
    fn rewards_are_nonpositive(data in vec_of(16), first in vec_of(2), style in 0usize..4) {
        let task = TaskConfig::default();
        let seq = ToySequence::new(task.frames, task.dim, data).unwrap();
        let r = reward_composite(&seq, &Condition::new(first, style), &RewardSpec::default(), &task).unwrap();
        for part in [r.smooth, r.endpoint, r.consistency, r.total] {
            prop_assert!(part <= 0.0);
        }
    }
}
