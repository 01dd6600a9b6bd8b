//! Oracles for advantages, clipping and the whole-step gradient.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rft_core::optimizer::{
    capo_token_objective, group_objective, group_objective_grad, kl_per_token, normalize_advantages, Branch,
};
use rft_core::policy::{sample_trajectory, token_log_probs, Group, PolicyParams};

proptest! {
    #[test]
    fn advantages_standardize(r in prop::collection::vec(-10.0f64..10.0, 2..8)) {
        let a = normalize_advantages(&r, 1e-8);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if a.iter().any(|x| *x != 0.0) {
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn advantages_affine_invariant(
        r in prop::collection::vec(-10.0f64..10.0, 2..8),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let base = normalize_advantages(&r, 1e-8);
        prop_assume!(base.iter().any(|x| *x != 0.0));
        let pos: Vec<f64> = r.iter().map(|x| a * x + b).collect();
        let neg: Vec<f64> = r.iter().map(|x| -a * x + b).collect();
        for ((x, y), z) in base.iter().zip(normalize_advantages(&pos, 1e-8)).zip(normalize_advantages(&neg, 1e-8)) {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((x + z).abs() < 1e-9);
        }
    }

    #[test]
    fn narrower_range_clips_a_superset(ratio in 0.2f64..2.0, adv in -3.0f64..3.0, eps in 0.01f64..0.5, div in 1.0f64..8.0) {
        let (wide_v, wide_b) = capo_token_objective(ratio, adv, eps);
        let (narrow_v, narrow_b) = capo_token_objective(ratio, adv, eps / div);
        if wide_b == Branch::Clipped {
            prop_assert_eq!(narrow_b, Branch::Clipped);
        }
        prop_assert!(narrow_v <= wide_v + 1e-15);
        prop_assert!((narrow_v - adv).abs() <= (wide_v - adv).abs() + 1e-12);
    }

    #[test]
    fn kl_nonnegative(a in -20.0f64..0.0, b in -20.0f64..0.0) {
        prop_assert!(kl_per_token(a, b) >= 0.0);
    }
}

fn random_group(p: &PolicyParams, rng: &mut ChaCha8Rng) -> Group {
    let trajectories = (0..4).map(|_| sample_trajectory(p, 0, 0, 1, 6, rng)).collect();
    Group {
        sample_id: "s".into(),
        trajectories,
        rewards: vec![],
    }
}

fn loss_at(p: &PolicyParams, reference: &PolicyParams, g: &Group, adv: &[f64], eps: f64, beta: f64) -> f64 {
    let new: Vec<Vec<f64>> = g
        .trajectories
        .iter()
        .map(|t| token_log_probs(p, t.prompt_class, &t.tokens).unwrap())
        .collect();
    let refl: Vec<Vec<f64>> = g
        .trajectories
        .iter()
        .map(|t| token_log_probs(reference, t.prompt_class, &t.tokens).unwrap())
        .collect();
    group_objective(g, &new, &refl, adv, eps, beta).unwrap().0
}

#[test]
fn whole_step_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = 1e-6;
    for point in 0..20 {
        let beta = if point % 2 == 0 { 0.0 } else { 0.04 };
        let old = PolicyParams::random(5, 1, 1.0, &mut rng);
        let group = random_group(&old, &mut rng);
        // live policy moved away from the sampling policy so some tokens clip
        let mut live = old.clone();
        for i in 0..live.num_params() {
            live.flat_set(i, live.flat_get(i) + rng.random_range(-0.3..0.3));
        }
        let reference = PolicyParams::random(5, 1, 1.0, &mut rng);
        let adv = normalize_advantages(&[rng.random(), rng.random(), rng.random(), rng.random()], 1e-8);
        let eps = 0.2;
        let (_, grad, _) = group_objective_grad(&live, &reference, &group, &adv, eps, beta).unwrap();
        let mut max_err = 0.0f64;
        for i in 0..live.num_params() {
            let x = live.flat_get(i);
            live.flat_set(i, x + h);
            let up = loss_at(&live, &reference, &group, &adv, eps, beta);
            live.flat_set(i, x - h);
            let down = loss_at(&live, &reference, &group, &adv, eps, beta);
            live.flat_set(i, x);
            let fd = (up - down) / (2.0 * h);
            let analytic = grad.flat_get(i);
            let err = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-4);
            max_err = max_err.max(err);
        }
        assert!(max_err < 1e-5, "point {point}: relative error {max_err}");
    }
}
