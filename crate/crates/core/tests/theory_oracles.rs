//! Monte Carlo oracle for exact returns and randomized bound checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rft_core::theory::{
    exact_return, make_random_mdp, max_l1, perturb_row, perturb_within_ratio, random_policy, verify_lemma,
    verify_proposition, Mdp, PropositionSetup, TabularPolicy,
};

fn draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Discounted return of one episode, truncated where gamma^t is negligible.
fn rollout(mdp: &Mdp, pi: &TabularPolicy, rng: &mut ChaCha8Rng) -> f64 {
    let mut s = draw(&mdp.initial, rng);
    let (mut ret, mut disc) = (0.0, 1.0);
    while disc > 1e-10 {
        let a = draw(pi.row(s), rng);
        ret += disc * mdp.r(s, a);
        let row: Vec<f64> = (0..mdp.states).map(|s2| mdp.p(s, a, s2)).collect();
        s = draw(&row, rng);
        disc *= mdp.gamma_discount;
    }
    ret
}

#[test]
fn exact_return_agrees_with_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let mdp = make_random_mdp(3, 2, 1.0, 0.7, &mut rng).unwrap();
        let pi = random_policy(3, 2, &mut rng);
        let exact = exact_return(&mdp, &pi).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rollout(&mdp, &pi, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} +- {se} vs exact {exact}");
    }
}

#[test]
fn exact_return_is_linear_in_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let mdp = make_random_mdp(4, 3, 1.0, 0.9, &mut rng).unwrap();
        let pi = random_policy(4, 3, &mut rng);
        let a: f64 = rng.random_range(-3.0..3.0);
        let mut scaled = mdp.clone();
        scaled.reward.iter_mut().for_each(|r| *r *= a);
        scaled.r_max = mdp.r_max * a.abs();
        let (j, js) = (exact_return(&mdp, &pi).unwrap(), exact_return(&scaled, &pi).unwrap());
        assert!((js - a * j).abs() < 1e-10 * (1.0 + j.abs()));
    }
}

#[test]
fn perturbation_respects_ratio_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let pi = random_policy(3, 5, &mut rng);
        let eps = rng.random_range(0.0..0.9);
        let q = perturb_within_ratio(&pi, eps, &mut rng).unwrap();
        assert!(q.validate().is_ok() || eps == 0.0);
        for (n, o) in q.probs.iter().zip(&pi.probs) {
            let r = n / o;
            assert!(r >= 1.0 - eps - 1e-12 && r <= 1.0 + eps + 1e-12);
        }
        assert!(max_l1(&q, &pi) <= eps + 1e-12);
    }
}

#[test]
fn two_action_construction_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let old = TabularPolicy::uniform(1, 2);
    let mut best = 0.0f64;
    for _ in 0..100 {
        let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let new = TabularPolicy::new(1, 2, perturb_row(old.row(0), &u, 0.1)).unwrap();
        best = best.max(max_l1(&new, &old));
    }
    assert!(best >= 0.99 * 0.1);
}

#[test]
fn bounds_hold_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lemma = verify_lemma(2000, 5, 5, 0.2, &mut rng).unwrap();
    assert_eq!(lemma.violations, 0);
    assert!(lemma.max_l1 <= 0.2 + 1e-12);
    let setup = PropositionSetup::new(2000, 5, 5, 0.95, 0.2);
    let prop = verify_proposition(&setup, &mut rng).unwrap();
    assert_eq!(prop.violations, 0);
    assert!(prop.max_ratio_of_bound <= 1.0);
    let zero = verify_lemma(100, 5, 5, 0.0, &mut rng).unwrap();
    assert_eq!(zero.max_l1, 0.0);
}
