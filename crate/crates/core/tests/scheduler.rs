#![allow(clippy::needless_range_loop)]

use portrait_field::scheduler::{
    allocate, allocate_losses, classes_in, real_shares, select_pixels, AllocationPlan, ClassLossStats,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn present_subset(mask: u8, k: usize) -> Vec<usize> {
    let p: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
    if p.is_empty() {
        vec![0]
    } else {
        p
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn allocation_is_exact_and_proportional(
        losses in prop::collection::vec(0.0f64..10.0, 1..8),
        extra in 0usize..4096,
        mask in any::<u8>(),
    ) {
        let present = present_subset(mask, losses.len());
        let total = present.len() + extra;
        let plan = allocate_losses(&losses, total, &present).unwrap();
        prop_assert_eq!(plan.counts.iter().sum::<usize>(), total);
        let shares = real_shares(&losses, total, &present);
        for k in 0..losses.len() {
            if present.contains(&k) {
                prop_assert!(plan.counts[k] >= 1);
            } else {
                prop_assert_eq!(plan.counts[k], 0);
                prop_assert_eq!(shares[k], 0.0);
            }
        }
        // before the min-one adjustment every count is within one ray of its share
        let unadjusted = portrait_field::scheduler::largest_remainder(&shares, total);
        prop_assert_eq!(unadjusted.iter().sum::<usize>(), total);
        for k in 0..losses.len() {
            prop_assert!((unadjusted[k] as f64 - shares[k]).abs() < 1.0);
        }
    }

    #[test]
    fn raising_one_loss_never_lowers_its_allocation(
        losses in prop::collection::vec(0.01f64..10.0, 2..8),
        which in any::<prop::sample::Index>(),
        bump in 0.0f64..20.0,
        total in 8usize..2048,
    ) {
        let k = which.index(losses.len());
        let present: Vec<usize> = (0..losses.len()).collect();
        let before = allocate_losses(&losses, total, &present).unwrap();
        let mut raised = losses.clone();
        raised[k] += bump;
        let after = allocate_losses(&raised, total, &present).unwrap();
        prop_assert!(after.counts[k] >= before.counts[k]);
    }

    #[test]
    fn allocation_ignores_class_area(
        rays_per_class in prop::collection::vec(1usize..50, 4),
        losses in prop::collection::vec(0.01f64..3.0, 4),
        doubled in 0usize..4,
    ) {
        // same per-ray losses, one class observed on twice as many pixels
        let run = |factor: usize| {
            let mut s = ClassLossStats::new(4);
            for (k, &n) in rays_per_class.iter().enumerate() {
                let n = if k == doubled { n * factor } else { n };
                for _ in 0..n {
                    s.record_ray_loss(k, losses[k], 0.0).unwrap();
                }
            }
            s.finish_epoch();
            allocate(&s, 512, &[0, 1, 2, 3]).unwrap()
        };
        prop_assert_eq!(run(1), run(2));
    }

    #[test]
    fn recording_order_does_not_matter(entries in prop::collection::vec((0usize..3, 0.0f64..1.0, 0.0f64..1.0), 1..60)) {
        let mut forward = ClassLossStats::new(3);
        for &(k, a, b) in &entries {
            forward.record_ray_loss(k, a, b).unwrap();
        }
        let (left, right) = entries.split_at(entries.len() / 2);
        let mut merged = ClassLossStats::new(3);
        let mut other = ClassLossStats::new(3);
        for &(k, a, b) in right {
            other.record_ray_loss(k, a, b).unwrap();
        }
        for &(k, a, b) in left {
            merged.record_ray_loss(k, a, b).unwrap();
        }
        merged.merge(&other).unwrap();
        forward.finish_epoch();
        merged.finish_epoch();
        for k in 0..3 {
            prop_assert!((forward.averages()[k] - merged.averages()[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_allocation_selects_nothing_from_that_class() {
    let labels: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
    let plan = AllocationPlan {
        counts: vec![4, 0, 4, 4],
        total: 12,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let px = select_pixels(&plan, &labels, &mut rng).unwrap();
    assert!(px.iter().all(|&i| labels[i] != 1));
    assert_eq!(classes_in(&labels, 4), vec![0, 1, 2, 3]);
}

#[test]
fn selection_frequency_is_uniform_within_a_class() {
    // class 1 covers 20 pixels, 5 of them drawn per epoch
    let labels: Vec<u8> = (0..50).map(|i| u8::from(i % 5 < 2)).collect();
    let plan = AllocationPlan {
        counts: vec![5, 5],
        total: 10,
    };
    let epochs = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut hits = vec![0usize; labels.len()];
    for _ in 0..epochs {
        for i in select_pixels(&plan, &labels, &mut rng).unwrap() {
            hits[i] += 1;
        }
    }
    for class in 0..2u8 {
        let pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let p = 5.0 / pool.len() as f64;
        let mean = epochs as f64 * p;
        let sd = (epochs as f64 * p * (1.0 - p)).sqrt();
        for &i in &pool {
            assert!((hits[i] as f64 - mean).abs() <= 3.0 * sd, "pixel {i}: {} vs {mean}", hits[i]);
        }
    }
}
