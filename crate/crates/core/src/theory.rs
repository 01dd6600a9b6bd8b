//! Exact-return checks of the policy smoothness and return stability
//! bounds on small random MDPs.
//!
//! For a policy `pi'` whose ratio to `pi_old` stays in `[1 - eps, 1 + eps]`
//! in every state:
//!
//! ```text
//! max_s || pi'(.|s) - pi_old(.|s) ||_1  <=  eps
//! | J(pi') - J(pi_old) |               <=  2 * R_max * eps / (1 - gamma)^2
//! ```
//!
//! `J` is computed by solving `(I - gamma P_pi) v = r_pi` directly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("singular Bellman system")]
    Singular,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Finite discounted MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    pub states: usize,
    pub actions: usize,
    /// `transition[(s * A + a) * S + s2]`.
    pub transition: Vec<f64>,
    /// `reward[s * A + a]`.
    pub reward: Vec<f64>,
    pub r_max: f64,
    pub gamma_discount: f64,
    pub initial: Vec<f64>,
}

impl Mdp {
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.actions + a) * self.states + s2]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.actions + a]
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let (n, m) = (self.states, self.actions);
        if n == 0 || m == 0 {
            return Err(TheoryError::InvalidMdp("empty state or action set".into()));
        }
        if self.transition.len() != n * m * n || self.reward.len() != n * m || self.initial.len() != n {
            return Err(TheoryError::InvalidMdp("shape mismatch".into()));
        }
        if !(self.gamma_discount > 0.0 && self.gamma_discount < 1.0) {
            return Err(TheoryError::InvalidMdp(format!(
                "discount {} outside (0, 1)",
                self.gamma_discount
            )));
        }
        for row in self.transition.chunks(n) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(TheoryError::InvalidMdp(format!("transition row sums to {sum}")));
            }
        }
        let sum: f64 = self.initial.iter().sum();
        if self.initial.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(TheoryError::InvalidMdp(format!("initial distribution sums to {sum}")));
        }
        if self.reward.iter().any(|r| !(r.abs() <= self.r_max)) {
            return Err(TheoryError::InvalidMdp("reward exceeds R_max".into()));
        }
        Ok(())
    }
}

/// Row-stochastic `S x A` policy with strictly positive entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub states: usize,
    pub actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(states: usize, actions: usize, probs: Vec<f64>) -> Result<Self, TheoryError> {
        let p = Self {
            states,
            actions,
            probs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(states: usize, actions: usize) -> Self {
        Self {
            states,
            actions,
            probs: vec![1.0 / actions as f64; states * actions],
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.actions..(s + 1) * self.actions]
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.probs.len() != self.states * self.actions || self.actions == 0 {
            return Err(TheoryError::InvalidPolicy("shape mismatch".into()));
        }
        for s in 0..self.states {
            let row = self.row(s);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(TheoryError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Normalized i.i.d. exponentials: a uniform draw from the simplex. The
/// shift keeps every entry strictly positive.
fn flat_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-12)
        .collect();
    let sum: f64 = x.iter().sum();
    for v in &mut x {
        *v /= sum;
    }
    x
}

pub fn make_random_mdp<R: Rng + ?Sized>(
    states: usize,
    actions: usize,
    r_max: f64,
    gamma_discount: f64,
    rng: &mut R,
) -> Result<Mdp, TheoryError> {
    if states == 0 || actions == 0 {
        return Err(TheoryError::Invalid("S and A must be >= 1".into()));
    }
    let mut transition = Vec::with_capacity(states * actions * states);
    for _ in 0..states * actions {
        transition.extend(flat_simplex(states, rng));
    }
    let reward = (0..states * actions)
        .map(|_| rng.random_range(-r_max..=r_max))
        .collect();
    let mdp = Mdp {
        states,
        actions,
        transition,
        reward,
        r_max,
        gamma_discount,
        initial: flat_simplex(states, rng),
    };
    mdp.validate()?;
    Ok(mdp)
}

pub fn random_policy<R: Rng + ?Sized>(states: usize, actions: usize, rng: &mut R) -> TabularPolicy {
    let probs = (0..states).flat_map(|_| flat_simplex(actions, rng)).collect();
    TabularPolicy {
        states,
        actions,
        probs,
    }
}

/// Discounted return from the initial distribution.
pub fn exact_return(mdp: &Mdp, policy: &TabularPolicy) -> Result<f64, TheoryError> {
    if policy.states != mdp.states || policy.actions != mdp.actions {
        return Err(TheoryError::InvalidPolicy("shape does not match MDP".into()));
    }
    let n = mdp.states;
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for (act, &pa) in policy.row(s).iter().enumerate() {
            r[s] += pa * mdp.r(s, act);
            for s2 in 0..n {
                a[(s, s2)] -= mdp.gamma_discount * pa * mdp.p(s, act, s2);
            }
        }
    }
    let v = a.lu().solve(&r).ok_or(TheoryError::Singular)?;
    Ok(mdp.initial.iter().zip(v.iter()).map(|(d, x)| d * x).sum())
}

/// Zero-sum, ratio-bounded perturbation of one state's action distribution:
/// `delta_a = pi_a (u_a - mean_pi(u))` scaled so `max_a |delta_a| / pi_a`
/// equals `eps` exactly.
pub fn perturb_row(row: &[f64], u: &[f64], eps: f64) -> Vec<f64> {
    let ubar: f64 = row.iter().zip(u).map(|(p, x)| p * x).sum();
    let dev: Vec<f64> = u.iter().map(|x| x - ubar).collect();
    let max = dev.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if max == 0.0 || eps == 0.0 {
        return row.to_vec();
    }
    let k = eps / max;
    row.iter().zip(&dev).map(|(p, d)| p * (1.0 + k * d)).collect()
}

/// `pi'` with every ratio `pi'/pi_old` in `[1 - eps, 1 + eps]`.
pub fn perturb_within_ratio<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    eps: f64,
    rng: &mut R,
) -> Result<TabularPolicy, TheoryError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(TheoryError::Invalid(format!("eps {eps} outside [0, 1)")));
    }
    let mut probs = Vec::with_capacity(policy.probs.len());
    for s in 0..policy.states {
        let u: Vec<f64> = (0..policy.actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        probs.extend(perturb_row(policy.row(s), &u, eps));
    }
    Ok(TabularPolicy {
        states: policy.states,
        actions: policy.actions,
        probs,
    })
}

pub fn max_l1(a: &TabularPolicy, b: &TabularPolicy) -> f64 {
    (0..a.states)
        .map(|s| a.row(s).iter().zip(b.row(s)).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_ratio_deviation(new: &TabularPolicy, old: &TabularPolicy) -> f64 {
    new.probs
        .iter()
        .zip(&old.probs)
        .map(|(n, o)| (n / o - 1.0).abs())
        .fold(0.0, f64::max)
}

pub fn proposition_bound(r_max: f64, gamma_discount: f64, eps: f64) -> f64 {
    2.0 * r_max * eps / ((1.0 - gamma_discount) * (1.0 - gamma_discount))
}

/// Slack for floating-point comparison against the bounds.
const BOUND_TOL: f64 = 1e-12;

/// One randomized trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub eps: f64,
    pub l1: f64,
    pub dj: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub eps: f64,
    pub max_l1: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub trials: usize,
    pub eps: f64,
    pub max_dj: f64,
    pub max_ratio_of_bound: f64,
    pub violations: usize,
    pub records: Vec<TrialRecord>,
}

/// Draws sizes uniformly from `1..=max_states` and `2..=max_actions`.
fn draw_sizes<R: Rng + ?Sized>(max_states: usize, max_actions: usize, rng: &mut R) -> (usize, usize) {
    let s = rng.random_range(1..=max_states.max(1));
    let a = rng.random_range(2.min(max_actions.max(1))..=max_actions.max(1));
    (s, a)
}

pub fn verify_lemma<R: Rng + ?Sized>(
    trials: usize,
    max_states: usize,
    max_actions: usize,
    eps: f64,
    rng: &mut R,
) -> Result<LemmaReport, TheoryError> {
    if trials == 0 {
        return Err(TheoryError::Invalid("trials must be >= 1".into()));
    }
    let mut worst = 0.0f64;
    let mut violations = 0;
    for _ in 0..trials {
        let (s, a) = draw_sizes(max_states, max_actions, rng);
        let old = random_policy(s, a, rng);
        let new = perturb_within_ratio(&old, eps, rng)?;
        let l1 = max_l1(&new, &old);
        let ratio_ok = max_ratio_deviation(&new, &old) <= eps + BOUND_TOL;
        if l1 > eps + BOUND_TOL || !ratio_ok {
            violations += 1;
        }
        worst = worst.max(l1);
    }
    Ok(LemmaReport {
        trials,
        eps,
        max_l1: worst,
        violations,
    })
}

/// Settings of a proposition check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropositionSetup {
    pub trials: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub r_max: f64,
    pub gamma_discount: f64,
    pub eps: f64,
    /// Multiplies every observed |dJ| before comparison. 1 in real runs;
    /// other values exist only to exercise violation handling.
    pub dj_scale: f64,
}

impl PropositionSetup {
    pub fn new(trials: usize, max_states: usize, max_actions: usize, gamma_discount: f64, eps: f64) -> Self {
        Self {
            trials,
            max_states,
            max_actions,
            r_max: 1.0,
            gamma_discount,
            eps,
            dj_scale: 1.0,
        }
    }
}

pub fn verify_proposition<R: Rng + ?Sized>(
    setup: &PropositionSetup,
    rng: &mut R,
) -> Result<PropositionReport, TheoryError> {
    if setup.trials == 0 {
        return Err(TheoryError::Invalid("trials must be >= 1".into()));
    }
    let bound = proposition_bound(setup.r_max, setup.gamma_discount, setup.eps);
    let mut records = Vec::with_capacity(setup.trials);
    for trial in 0..setup.trials {
        let (s, a) = draw_sizes(setup.max_states, setup.max_actions, rng);
        let mdp = make_random_mdp(s, a, setup.r_max, setup.gamma_discount, rng)?;
        let old = random_policy(s, a, rng);
        let new = perturb_within_ratio(&old, setup.eps, rng)?;
        let dj = setup.dj_scale * (exact_return(&mdp, &new)? - exact_return(&mdp, &old)?).abs();
        records.push(TrialRecord {
            trial,
            eps: setup.eps,
            l1: max_l1(&new, &old),
            dj,
            bound,
            ok: dj <= bound + BOUND_TOL,
        });
    }
    Ok(summarize(setup.eps, bound, records))
}

fn summarize(eps: f64, bound: f64, records: Vec<TrialRecord>) -> PropositionReport {
    let max_dj = records.iter().map(|r| r.dj).fold(0.0, f64::max);
    PropositionReport {
        trials: records.len(),
        eps,
        max_dj,
        max_ratio_of_bound: if bound > 0.0 { max_dj / bound } else { 0.0 },
        violations: records.iter().filter(|r| !r.ok).count(),
        records,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub eps: f64,
    pub mean_dj: f64,
    pub max_dj: f64,
    pub bound: f64,
}

/// Settings of the clipping-range sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessConfig {
    pub eps_normal: f64,
    pub divisor: f64,
    /// Extra grid points besides `eps_normal` and `eps_normal / divisor`.
    pub grid: Vec<f64>,
    pub trials: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub r_max: f64,
    pub gamma_discount: f64,
    pub seed: u64,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        Self {
            eps_normal: 0.2,
            divisor: 4.0,
            grid: vec![0.01, 0.1, 0.3],
            trials: 500,
            max_states: 5,
            max_actions: 5,
            r_max: 1.0,
            gamma_discount: 0.9,
            seed: 0,
        }
    }
}

impl TightnessConfig {
    /// Sorted, deduplicated eps values.
    pub fn eps_values(&self) -> Vec<f64> {
        let mut v = vec![self.eps_normal, self.eps_normal / self.divisor];
        v.extend(&self.grid);
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

/// Sweeps eps over the same seeded MDPs, policies and perturbation
/// directions, so rows differ only in the clipping range.
pub fn capo_tightness_experiment(cfg: &TightnessConfig) -> Result<Vec<TightnessRow>, TheoryError> {
    if cfg.trials == 0 {
        return Err(TheoryError::Invalid("trials must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for eps in cfg.eps_values() {
        if !(0.0..1.0).contains(&eps) {
            return Err(TheoryError::Invalid(format!("eps {eps} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for _ in 0..cfg.trials {
            let (s, a) = draw_sizes(cfg.max_states, cfg.max_actions, &mut rng);
            let mdp = make_random_mdp(s, a, cfg.r_max, cfg.gamma_discount, &mut rng)?;
            let old = random_policy(s, a, &mut rng);
            let new = perturb_within_ratio(&old, eps, &mut rng)?;
            let dj = (exact_return(&mdp, &new)? - exact_return(&mdp, &old)?).abs();
            sum += dj;
            max = max.max(dj);
        }
        rows.push(TightnessRow {
            eps,
            mean_dj: sum / cfg.trials as f64,
            max_dj: max,
            bound: proposition_bound(cfg.r_max, cfg.gamma_discount, eps),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coin_mdp() -> Mdp {
        Mdp {
            states: 1,
            actions: 2,
            transition: vec![1.0, 1.0],
            reward: vec![1.0, -1.0],
            r_max: 1.0,
            gamma_discount: 0.9,
            initial: vec![1.0],
        }
    }

    #[test]
    fn single_state_returns() {
        let mdp = coin_mdp();
        assert_eq!(exact_return(&mdp, &TabularPolicy::uniform(1, 2)).unwrap(), 0.0);
        let p = TabularPolicy::new(1, 2, vec![0.55, 0.45]).unwrap();
        // 0.1 per step, geometric sum 1 / (1 - 0.9)
        assert!((exact_return(&mdp, &p).unwrap() - 1.0).abs() < 1e-12);
        let bound = proposition_bound(1.0, 0.9, 0.1);
        assert!((bound - 20.0).abs() < 1e-9);
        assert!((1.0 / bound - 0.05).abs() < 1e-12);
    }

    #[test]
    fn tight_two_action_case() {
        let row = perturb_row(&[0.5, 0.5], &[1.0, -1.0], 0.1);
        assert!((row[0] - 0.55).abs() < 1e-15 && (row[1] - 0.45).abs() < 1e-15);
        let old = TabularPolicy::uniform(1, 2);
        let new = TabularPolicy::new(1, 2, row).unwrap();
        assert!((max_l1(&new, &old) - 0.1).abs() < 1e-12);
        assert!((max_ratio_deviation(&new, &old) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_eps_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_policy(3, 4, &mut rng);
        assert_eq!(perturb_within_ratio(&p, 0.0, &mut rng).unwrap(), p);
    }

    #[test]
    fn mdp_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let m = make_random_mdp(4, 3, 1.0, 0.9, &mut rng).unwrap();
            assert!(m.validate().is_ok());
        }
        let m = make_random_mdp(1, 1, 1.0, 0.5, &mut rng).unwrap();
        assert_eq!(m.transition, vec![1.0]);
    }

    #[test]
    fn seeded_mdp_is_deterministic() {
        let a = make_random_mdp(3, 2, 1.0, 0.9, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_random_mdp(3, 2, 1.0, 0.9, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn proposition_reports_injected_violation() {
        let mut setup = PropositionSetup::new(50, 3, 3, 0.9, 0.2);
        setup.dj_scale = 1e6;
        let r = verify_proposition(&setup, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.violations > 0);
    }

    #[test]
    fn tightness_grid() {
        let cfg = TightnessConfig {
            trials: 50,
            ..TightnessConfig::default()
        };
        let rows = capo_tightness_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), cfg.eps_values().len());
        let at = |e: f64| rows.iter().find(|r| r.eps == e).unwrap().clone();
        let (n, c) = (at(0.2), at(0.05));
        assert!(c.max_dj <= n.max_dj);
        assert_eq!(c.bound * 4.0, n.bound);
    }
}
