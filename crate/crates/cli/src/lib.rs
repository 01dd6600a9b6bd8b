//! Pipeline behind the `rft` executable: sft, annotate, explore, train,
//! eval and verify-theory over one output directory.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use error::CliError;
pub use manifest::{RunManifest, StageRecord};

#[derive(Debug, Parser)]
#[command(name = "rft", version, about = "Reinforcement fine-tuning pipeline for report generators")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Use the offline lexicon judge.
    #[arg(long, global = true)]
    pub mock_judge: bool,
    /// One clipping range for all samples.
    #[arg(long, global = true)]
    pub grpo: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised fit; writes sft.ckpt.
    Sft {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Criticality labels; writes annotated.jsonl.
    Annotate {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Ranks samples and selects the training subset; writes scores.csv and subset.jsonl.
    Explore {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// JSON object of sample id to a replacement prediction.
        #[arg(long, hide = true)]
        override_predictions: Option<PathBuf>,
    },
    /// Policy optimization on the subset; writes train_log.csv and checkpoints.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        subset: Option<PathBuf>,
        /// Continue from the latest intermediate checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Scores a checkpoint; writes eval-<tag>.json and eval-<tag>.csv.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Randomized checks of the policy stability bounds; writes theory.csv.
    VerifyTheory {
        #[arg(long, hide = true, default_value_t = 1.0)]
        dj_scale: f64,
    },
    /// Writes a synthetic corpus.
    GenFixture {
        #[arg(long, default_value_t = 260)]
        n: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            mock_judge: self.mock_judge,
            grpo: self.grpo,
        }
    }
}

/// Runs one subcommand and returns its summary line.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    use pipeline::*;
    if let Command::GenFixture { n, output } = &cli.command {
        cmd_gen_fixture(*n, cli.seed.unwrap_or(0), output)?;
        return Ok(format!("gen-fixture: {n} samples -> {}", output.display()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides())?;
    Ok(match &cli.command {
        Command::Sft { corpus } => {
            let r = cmd_sft(&cfg, corpus.as_deref())?;
            format!(
                "sft: {} samples, nll {:.4} -> {:.4}, wrote {}",
                r.train_samples,
                r.nll_before,
                r.nll_after,
                r.checkpoint.display()
            )
        }
        Command::Annotate { corpus } => {
            let r = cmd_annotate(&cfg, corpus.as_deref())?;
            format!(
                "annotate: {} new, {} critical, {} normal, {} remote requests, wrote {}",
                r.newly_annotated,
                r.critical,
                r.normal,
                r.remote_requests,
                r.output.display()
            )
        }
        Command::Explore {
            checkpoint,
            corpus,
            override_predictions,
        } => {
            let overrides = match override_predictions {
                Some(p) => load_overrides(p)?,
                None => Default::default(),
            };
            let r = cmd_explore(&cfg, checkpoint.as_deref(), corpus.as_deref(), &overrides)?;
            format!(
                "explore: selected {} of {}, wrote {} and {}",
                r.selected,
                r.ranked,
                r.scores.display(),
                r.subset.display()
            )
        }
        Command::Train {
            checkpoint,
            subset,
            resume,
        } => {
            let r = cmd_train(&cfg, checkpoint.as_deref(), subset.as_deref(), *resume)?;
            let from = r.resumed_from.map(|s| format!(" (resumed at {s})")).unwrap_or_default();
            format!(
                "train: {} steps{from}, {} skipped samples, final mean reward {:.4}, wrote {}",
                r.steps_run,
                r.skipped_samples,
                r.final_mean_reward,
                r.checkpoint.display()
            )
        }
        Command::Eval {
            checkpoint,
            corpus,
            tag,
        } => {
            let r = cmd_eval(&cfg, checkpoint.as_deref(), corpus.as_deref(), tag.as_deref())?;
            format!(
                "eval: {} samples, mean total {:.4}, consistency +1 rate {:.4}, bleu2 {:.4}",
                r.samples, r.means.total, r.consistency_plus_rate, r.means.bleu2
            )
        }
        Command::VerifyTheory { dj_scale } => {
            let r = cmd_verify_theory(&cfg, *dj_scale)?;
            format!(
                "verify-theory: lemma {} trials max L1 {:.6} ({} violations); proposition max dJ/bound {:.6} ({} violations)",
                r.lemma.trials,
                r.lemma.max_l1,
                r.lemma.violations,
                r.proposition.max_ratio_of_bound,
                r.proposition.violations
            )
        }
        Command::GenFixture { .. } => unreachable!("handled above"),
    })
}
