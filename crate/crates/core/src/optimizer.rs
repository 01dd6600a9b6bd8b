//! Group-relative clipped policy optimization with a criticality-gated
//! clipping range.
//!
//! For each sample a group of G responses is drawn from the sampling policy
//! and scored. Per-token objective:
//!
//! ```text
//! min(ratio * A, clip(ratio, 1 - eps_i, 1 + eps_i) * A) - beta * KL_t
//! ```
//!
//! averaged over tokens of a response, then over the group. `eps_i` is
//! `eps_normal` for normal samples and `eps_normal / divisor` for critical
//! ones; divisor 1 is plain GRPO. The KL term uses the per-token estimator
//! `exp(ref - new) - (ref - new) - 1` and sits outside the `min`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Criticality, Sample};
use crate::judge::Judge;
use crate::policy::{
    sample_group, snapshot, token_log_probs, Gradient, Group, Policy, PolicyError, ReportCodec,
    Snapshot, DEFAULT_MAX_LEN,
};
use crate::reward::{total_reward, RewardConfig};

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample {0:?} has no criticality label; run annotation before training")]
    Unannotated(String),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyCorpus,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("log write failed: {0}")]
    Log(#[from] csv::Error),
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapoConfig {
    pub eps_normal: f64,
    pub eps_critical_divisor: f64,
    /// KL weight.
    pub beta: f64,
    /// Responses per sample.
    pub group_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub std_guard: f64,
    pub seed: u64,
    pub max_len: usize,
    pub batch_size: usize,
    /// Checkpoint cadence in steps (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
}

impl Default for CapoConfig {
    fn default() -> Self {
        Self {
            eps_normal: 0.2,
            eps_critical_divisor: 4.0,
            beta: 0.04,
            group_size: 4,
            lr: 1e-2,
            steps: 200,
            std_guard: 1e-8,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
            batch_size: 1,
            checkpoint_every: 50,
        }
    }
}

impl CapoConfig {
    pub fn eps_critical(&self) -> f64 {
        self.eps_normal / self.eps_critical_divisor
    }

    /// Plain GRPO: one clipping range for every sample.
    pub fn grpo(mut self) -> Self {
        self.eps_critical_divisor = 1.0;
        self
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let err = |m: &str| Err(OptimizerError::Config(m.to_string()));
        if !(self.eps_normal > 0.0 && self.eps_normal.is_finite()) {
            return err("eps_normal must be > 0");
        }
        if !(self.eps_critical_divisor >= 1.0 && self.eps_critical_divisor.is_finite()) {
            return err("eps_critical_divisor must be >= 1 so that eps_critical <= eps_normal");
        }
        if !(self.beta >= 0.0) {
            return err("beta must be >= 0");
        }
        if self.group_size < 2 {
            return err("group_size must be >= 2");
        }
        if !(self.lr > 0.0) {
            return err("lr must be > 0");
        }
        if !(self.std_guard > 0.0) {
            return err("std_guard must be > 0");
        }
        if self.max_len == 0 {
            return err("max_len must be >= 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Within-group standardization with population std. A group whose std is
/// below `std_guard` gets all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], std_guard: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= std_guard) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Per-token `exp(new - old)`.
pub fn importance_ratios(new_lp: &[f64], old_lp: &[f64]) -> Result<Vec<f64>, OptimizerError> {
    if new_lp.len() != old_lp.len() {
        return Err(OptimizerError::LengthMismatch(new_lp.len(), old_lp.len()));
    }
    Ok(new_lp.iter().zip(old_lp).map(|(n, o)| (n - o).exp()).collect())
}

/// Clipping range for a sample of the given criticality.
pub fn epsilon_for(criticality: Criticality, cfg: &CapoConfig) -> Result<f64, OptimizerError> {
    match criticality {
        Criticality::Critical => Ok(cfg.eps_critical()),
        Criticality::Normal => Ok(cfg.eps_normal),
        Criticality::Unannotated => Err(OptimizerError::Unannotated(String::new())),
    }
}

/// Nonnegative per-token KL estimate against the reference policy.
pub fn kl_per_token(new_lp: f64, ref_lp: f64) -> f64 {
    let x = ref_lp - new_lp;
    x.exp_m1() - x
}

/// Which side of the `min` is active for a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Unclipped,
    Clipped,
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`. `Clipped` only when
/// the clipped term is strictly smaller; its derivative in `ratio` is then 0,
/// otherwise `A`.
pub fn capo_token_objective(ratio: f64, advantage: f64, eps: f64) -> (f64, Branch) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if clipped < unclipped {
        (clipped, Branch::Clipped)
    } else {
        (unclipped, Branch::Unclipped)
    }
}

/// Per-token bookkeeping from [`group_objective`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenDiag {
    pub ratio: f64,
    pub branch: Branch,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupDiagnostics {
    /// `tokens[i][t]` for trajectory i, token t.
    pub tokens: Vec<Vec<TokenDiag>>,
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

impl GroupDiagnostics {
    fn finish(tokens: Vec<Vec<TokenDiag>>) -> Self {
        let n: usize = tokens.iter().map(Vec::len).sum();
        let clipped = tokens
            .iter()
            .flatten()
            .filter(|d| d.branch == Branch::Clipped)
            .count();
        let kl: f64 = tokens.iter().flatten().map(|d| d.kl).sum();
        let (clip_fraction, mean_kl) = if n == 0 {
            (0.0, 0.0)
        } else {
            (clipped as f64 / n as f64, kl / n as f64)
        };
        Self {
            tokens,
            clip_fraction,
            mean_kl,
        }
    }
}

/// Group loss (negated objective) from precomputed log-probabilities.
///
/// `new_lps[i]`, `ref_lps[i]` and `group.trajectories[i].logprobs_old` must
/// have equal lengths, and there must be one advantage per trajectory.
pub fn group_objective(
    group: &Group,
    new_lps: &[Vec<f64>],
    ref_lps: &[Vec<f64>],
    advantages: &[f64],
    eps: f64,
    beta: f64,
) -> Result<(f64, GroupDiagnostics), OptimizerError> {
    let g = group.trajectories.len();
    for len in [new_lps.len(), ref_lps.len(), advantages.len()] {
        if len != g {
            return Err(OptimizerError::LengthMismatch(len, g));
        }
    }
    let mut objective = 0.0;
    let mut diags = Vec::with_capacity(g);
    for (i, traj) in group.trajectories.iter().enumerate() {
        let ratios = importance_ratios(&new_lps[i], &traj.logprobs_old)?;
        if ref_lps[i].len() != ratios.len() {
            return Err(OptimizerError::LengthMismatch(ref_lps[i].len(), ratios.len()));
        }
        let mut sum = 0.0;
        let mut row = Vec::with_capacity(ratios.len());
        for (t, &ratio) in ratios.iter().enumerate() {
            let (value, branch) = capo_token_objective(ratio, advantages[i], eps);
            let kl = kl_per_token(new_lps[i][t], ref_lps[i][t]);
            sum += value - beta * kl;
            row.push(TokenDiag { ratio, branch, kl });
        }
        if !ratios.is_empty() {
            objective += sum / ratios.len() as f64;
        }
        diags.push(row);
    }
    objective /= g as f64;
    Ok((-objective, GroupDiagnostics::finish(diags)))
}

/// Loss, its analytic gradient with respect to the live policy, and
/// diagnostics.
///
/// Per token the objective's derivative is
/// `[A * ratio * 1{Unclipped} - beta * (1 - exp(ref - new))] * grad log pi`;
/// the loss gradient is its negation.
pub fn group_objective_grad<P: Policy + ?Sized>(
    policy: &P,
    reference: &P,
    group: &Group,
    advantages: &[f64],
    eps: f64,
    beta: f64,
) -> Result<(f64, P::Grad, GroupDiagnostics), OptimizerError> {
    let mut new_lps = Vec::with_capacity(group.trajectories.len());
    let mut ref_lps = Vec::with_capacity(group.trajectories.len());
    for traj in &group.trajectories {
        new_lps.push(token_log_probs(policy, traj.prompt_class, &traj.tokens)?);
        ref_lps.push(token_log_probs(reference, traj.prompt_class, &traj.tokens)?);
    }
    let (loss, diags) = group_objective(group, &new_lps, &ref_lps, advantages, eps, beta)?;

    let g = group.trajectories.len() as f64;
    let mut grad = policy.zero_grad();
    for (i, traj) in group.trajectories.iter().enumerate() {
        let n = traj.len() as f64;
        for (t, d) in diags.tokens[i].iter().enumerate() {
            let surrogate = match d.branch {
                Branch::Unclipped => advantages[i] * d.ratio,
                Branch::Clipped => 0.0,
            };
            let kl_slope = beta * (1.0 - (ref_lps[i][t] - new_lps[i][t]).exp());
            let coeff = -(surrogate - kl_slope) / (g * n);
            if coeff != 0.0 {
                let pos = t + 1;
                policy.accumulate_grad_log_prob(
                    traj.prompt_class,
                    &traj.tokens[..pos],
                    traj.tokens[pos],
                    coeff,
                    &mut grad,
                );
            }
        }
    }
    Ok((loss, grad, diags))
}

/// Per-sample row of a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub sample_id: String,
    pub criticality: Criticality,
    pub eps_used: f64,
    pub mean_reward: f64,
    pub r_syntax_mean: f64,
    pub r_domain_mean: f64,
    /// Fraction of the group judged consistent (+1).
    pub consist_plus_rate: f64,
    /// Mean over responses whose Impression reward was computed.
    pub r_imp_mean: Option<f64>,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// Set when reward computation failed and the sample was left out of
    /// the update.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub samples: Vec<SampleStats>,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// Count of samples per clipping range used.
    pub eps_histogram: Vec<(f64, usize)>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Everything the loop needs besides the policy.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub codec: &'a ReportCodec,
    pub reward: &'a RewardConfig,
    pub judge: &'a Judge,
}

/// One update on `batch`. Groups are drawn from `old`; the loss gradient of
/// the live policy is averaged over the scored samples and applied once.
pub fn train_step<P: Policy + Clone, R: rand::Rng + ?Sized>(
    policy: &mut P,
    batch: &[&Sample],
    old: &Snapshot<P>,
    reference: &Snapshot<P>,
    cfg: &CapoConfig,
    ctx: TrainContext<'_>,
    step: u64,
    rng: &mut R,
) -> Result<StepStats, OptimizerError> {
    let mut eps_list = Vec::with_capacity(batch.len());
    for s in batch {
        let eps = epsilon_for(s.criticality, cfg)
            .map_err(|_| OptimizerError::Unannotated(s.id.clone()))?;
        eps_list.push(eps);
    }

    let mut total_grad = policy.zero_grad();
    let mut used = 0usize;
    let mut rows = Vec::with_capacity(batch.len());
    for (sample, &eps) in batch.iter().zip(&eps_list) {
        let class = ctx.codec.class_of(&sample.prompt);
        let mut group = sample_group(
            &**old,
            &sample.id,
            class,
            &ctx.codec.vocab,
            cfg.group_size,
            cfg.max_len,
            rng,
        );
        let mut breakdowns = Vec::with_capacity(group.trajectories.len());
        let mut failure = None;
        for traj in &group.trajectories {
            let text = ctx.codec.decode(&traj.tokens);
            match total_reward(&text, &sample.reference, ctx.reward, ctx.judge) {
                Ok(b) => breakdowns.push(b),
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        if let Some(reason) = failure {
            rows.push(SampleStats {
                sample_id: sample.id.clone(),
                criticality: sample.criticality,
                eps_used: eps,
                mean_reward: f64::NAN,
                r_syntax_mean: f64::NAN,
                r_domain_mean: f64::NAN,
                consist_plus_rate: f64::NAN,
                r_imp_mean: None,
                mean_kl: f64::NAN,
                clip_fraction: f64::NAN,
                skipped: Some(reason),
            });
            continue;
        }
        group.rewards = breakdowns.iter().map(|b| b.total).collect();
        let advantages = normalize_advantages(&group.rewards, cfg.std_guard);
        let (_, grad, diags) =
            group_objective_grad(&*policy, &**reference, &group, &advantages, eps, cfg.beta)?;
        total_grad.add_scaled(&grad, 1.0);
        used += 1;

        let g = breakdowns.len() as f64;
        rows.push(SampleStats {
            sample_id: sample.id.clone(),
            criticality: sample.criticality,
            eps_used: eps,
            mean_reward: group.rewards.iter().sum::<f64>() / g,
            r_syntax_mean: breakdowns.iter().map(|b| b.r_syntax).sum::<f64>() / g,
            r_domain_mean: breakdowns.iter().map(|b| b.r_domain).sum::<f64>() / g,
            consist_plus_rate: breakdowns
                .iter()
                .filter(|b| b.r_consistent == Some(1.0))
                .count() as f64
                / g,
            r_imp_mean: mean(breakdowns.iter().filter_map(|b| b.r_imp)),
            mean_kl: diags.mean_kl,
            clip_fraction: diags.clip_fraction,
            skipped: None,
        });
    }

    if used > 0 {
        total_grad.scale(1.0 / used as f64);
        policy.apply_gradient(&total_grad, -cfg.lr);
    } else {
        total_grad.scale(0.0);
    }

    let scored: Vec<&SampleStats> = rows.iter().filter(|r| r.skipped.is_none()).collect();
    let mut hist: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &eps in &eps_list {
        hist.entry(eps.to_bits()).or_insert((eps, 0)).1 += 1;
    }
    let mut eps_histogram: Vec<(f64, usize)> = hist.into_values().collect();
    eps_histogram.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(StepStats {
        step,
        mean_reward: mean(scored.iter().map(|r| r.mean_reward)).unwrap_or(f64::NAN),
        mean_kl: mean(scored.iter().map(|r| r.mean_kl)).unwrap_or(f64::NAN),
        clip_fraction: mean(scored.iter().map(|r| r.clip_fraction)).unwrap_or(f64::NAN),
        grad_norm: total_grad.norm() * (used > 0) as u8 as f64,
        eps_histogram,
        samples: rows,
    })
}

/// Column order of the training log.
pub const LOG_COLUMNS: [&str; 12] = [
    "step",
    "sample_id",
    "criticality",
    "eps_used",
    "mean_reward",
    "r_syntax_mean",
    "r_domain_mean",
    "consist_plus_rate",
    "r_imp_mean",
    "mean_kl",
    "clip_fraction",
    "grad_norm",
];

/// Training log CSV writer (one row per sample per step).
pub struct TrainingLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TrainingLog<W> {
    pub fn new(inner: W, write_header: bool) -> Result<Self, OptimizerError> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
        if write_header {
            writer.write_record(LOG_COLUMNS)?;
        }
        Ok(Self { writer })
    }

    pub fn append(&mut self, stats: &StepStats) -> Result<(), OptimizerError> {
        for row in &stats.samples {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            self.writer.write_record([
                stats.step.to_string(),
                row.sample_id.clone(),
                row.criticality.to_string(),
                row.eps_used.to_string(),
                row.mean_reward.to_string(),
                row.r_syntax_mean.to_string(),
                row.r_domain_mean.to_string(),
                row.consist_plus_rate.to_string(),
                opt(row.r_imp_mean),
                row.mean_kl.to_string(),
                row.clip_fraction.to_string(),
                stats.grad_norm.to_string(),
            ])?;
        }
        self.writer.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.writer
            .into_inner()
            .unwrap_or_else(|_| panic!("flushed writer cannot fail"))
    }
}

/// Training-set order: an infinite sequence of per-epoch permutations,
/// each a pure function of `(seed, epoch)`, so any step's batch can be
/// recomputed after a restart.
fn batch_indices(n: usize, seed: u64, step: u64, batch_size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        let perm = &cached.as_ref().expect("set above").1;
        out.push(perm[(pos % n as u64) as usize]);
    }
    out
}

/// The training loop state: live policy, frozen reference, RNG and step.
///
/// The sampling policy is refreshed from the live policy at the start of
/// every step.
pub struct Trainer<P> {
    pub policy: P,
    pub reference: Snapshot<P>,
    pub cfg: CapoConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<P: Policy + Clone> Trainer<P> {
    /// Fresh run. The reference is frozen from `init`.
    pub fn new(init: P, cfg: CapoConfig) -> Result<Self, OptimizerError> {
        cfg.validate()?;
        Ok(Self {
            reference: snapshot(&init),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            policy: init,
            cfg,
            step: 0,
        })
    }

    /// Continues a run from saved live parameters, RNG state and step.
    pub fn resume(
        policy: P,
        reference: Snapshot<P>,
        cfg: CapoConfig,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Self, OptimizerError> {
        cfg.validate()?;
        Ok(Self {
            policy,
            reference,
            cfg,
            rng,
            step,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps as u64
    }

    /// Runs one step on `subset` and advances the step counter.
    pub fn step(&mut self, subset: &Corpus, ctx: TrainContext<'_>) -> Result<StepStats, OptimizerError> {
        if subset.is_empty() {
            return Err(OptimizerError::EmptyCorpus);
        }
        if let Some(s) = subset
            .samples
            .iter()
            .find(|s| s.criticality == Criticality::Unannotated)
        {
            return Err(OptimizerError::Unannotated(s.id.clone()));
        }
        let idx = batch_indices(subset.len(), self.cfg.seed, self.step, self.cfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &subset.samples[i]).collect();
        let old = snapshot(&self.policy);
        let stats = train_step(
            &mut self.policy,
            &batch,
            &old,
            &self.reference,
            &self.cfg,
            ctx,
            self.step,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(stats)
    }
}
