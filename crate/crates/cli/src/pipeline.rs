//! Subcommand implementations. Each stage locks the output directory,
//! writes its outputs atomically and records itself in the manifest.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rft_core::corpus::{load_corpus, save_corpus};
use rft_core::explore::{run_target_exploration, write_scores_csv};
use rft_core::fixture::{split, synthetic_corpus};
use rft_core::judge::{annotate_corpus, VerdictCache};
use rft_core::metrics::{bleu_n, keyword_match, rouge_l, semantic_proxy, tokenize};
use rft_core::optimizer::TrainingLog;
use rft_core::policy::{
    encode_corpus, greedy_decode, mean_nll, snapshot, supervised_fit, PromptClassMap, RngState,
};
use rft_core::reward::total_reward;
use rft_core::theory::{
    capo_tightness_experiment, verify_lemma, verify_proposition, LemmaReport, PropositionSetup,
    TightnessConfig,
};
use rft_core::{
    Checkpoint, Corpus, Criticality, ExploreConfig, Judge, PolicyParams, ReportCodec, SectionHeaders,
    TrainContext, Trainer, Vocab,
};
use serde::Serialize;

use crate::config::{JudgeMode, RunConfig};
use crate::error::CliError;
use crate::manifest::{write_atomic, OutLock, StageLog};

pub const SFT_CHECKPOINT: &str = "sft.ckpt";
pub const ANNOTATED: &str = "annotated.jsonl";
pub const SCORES: &str = "scores.csv";
pub const SUBSET: &str = "subset.jsonl";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const THEORY_CSV: &str = "theory.csv";
pub const TIGHTNESS_CSV: &str = "tightness.csv";
pub const THEORY_SUMMARY: &str = "theory_summary.json";
pub const JUDGE_CACHE: &str = "judge_cache.jsonl";

pub const EVAL_COLUMNS: [&str; 13] = [
    "sample_id",
    "criticality",
    "bleu2",
    "bleu4",
    "rouge_l",
    "semantic",
    "keyword_f1",
    "r_syntax",
    "r_domain",
    "r_consistent",
    "r_imp",
    "total",
    "fallback_applied",
];

fn load_nonempty(path: &Path) -> Result<Corpus, CliError> {
    let corpus = load_corpus(path)?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{}: corpus is empty", path.display())));
    }
    Ok(corpus)
}

/// Leading part of the corpus used for sft, explore and train.
fn training_part(corpus: &Corpus, held_out: usize) -> Result<Corpus, CliError> {
    if held_out >= corpus.len() {
        return Err(CliError::Config(format!(
            "held_out = {held_out} leaves no training samples out of {}",
            corpus.len()
        )));
    }
    Ok(split(corpus, held_out).0)
}

/// `path` relative to `out` for manifest listings.
fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

fn build_codec(cfg: &RunConfig, corpus: &Corpus) -> Result<ReportCodec, CliError> {
    let max_classes = cfg.sft.max_classes;
    match &cfg.vocab {
        None => Ok(ReportCodec::from_corpus(corpus, max_classes)),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            let tokens = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            let vocab = Vocab::new(tokens).map_err(|e| CliError::Config(format!("vocab {}: {e}", p.display())))?;
            let classes = PromptClassMap::from_prompts(corpus.samples.iter().map(|s| s.prompt.as_str()), max_classes);
            Ok(ReportCodec::new(vocab, classes))
        }
    }
}

pub fn build_judge(cfg: &RunConfig, out: &Path) -> Result<Judge, CliError> {
    let lexicon = cfg.lexicon()?;
    match cfg.judge.mode {
        JudgeMode::Mock => Ok(Judge::mock(lexicon)),
        JudgeMode::Remote => {
            let settings = cfg.remote_settings()?;
            let cache_path = cfg.judge.cache.clone().unwrap_or_else(|| out.join(JUDGE_CACHE));
            let cache = VerdictCache::open(&cache_path)?;
            Ok(Judge::http(&settings, cache).with_templates(cfg.templates()?))
        }
    }
}

fn record_config_inputs(cfg: &RunConfig, log: &mut StageLog) -> Result<(), CliError> {
    for p in [&cfg.vocab, &cfg.lexicon, &cfg.judge.templates].into_iter().flatten() {
        log.input(p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SftReport {
    pub checkpoint: PathBuf,
    pub train_samples: usize,
    pub nll_before: f64,
    pub nll_after: f64,
}

/// Supervised fit from a seeded random initialization.
pub fn cmd_sft(cfg: &RunConfig, corpus: Option<&Path>) -> Result<SftReport, CliError> {
    let out = cfg.out_dir()?;
    let _lock = OutLock::acquire(out)?;
    let mut log = StageLog::start(cfg.hash());
    let corpus_path = match corpus {
        Some(p) => p,
        None => cfg.corpus_path()?,
    };
    let full = load_nonempty(corpus_path)?;
    log.input(corpus_path)?;
    record_config_inputs(cfg, &mut log)?;
    let train = training_part(&full, cfg.held_out)?;
    let codec = build_codec(cfg, &full)?;
    let data = encode_corpus(&codec, &train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = PolicyParams::random(codec.vocab.len(), codec.classes.len(), cfg.sft.init_scale, &mut rng);
    let params = supervised_fit(&init, &data, cfg.sft.epochs, cfg.sft.lr, &mut rng);
    let report = SftReport {
        checkpoint: out.join(SFT_CHECKPOINT),
        train_samples: train.len(),
        nll_before: mean_nll(&init, &data),
        nll_after: mean_nll(&params, &data),
    };
    Checkpoint {
        params,
        codec,
        step: 0,
        rng: None,
    }
    .save(&report.checkpoint)?;
    log.output(SFT_CHECKPOINT);
    log.finish(out, "sft")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotateReport {
    pub output: PathBuf,
    pub newly_annotated: usize,
    pub critical: usize,
    pub normal: usize,
    pub remote_requests: usize,
}

/// Fills in criticality and writes `annotated.jsonl`. On a judge failure
/// the partially annotated corpus is still written before the error is
/// returned; remote verdicts are in the persistent cache.
pub fn cmd_annotate(cfg: &RunConfig, corpus: Option<&Path>) -> Result<AnnotateReport, CliError> {
    let out = cfg.out_dir()?;
    let _lock = OutLock::acquire(out)?;
    let mut log = StageLog::start(cfg.hash());
    let corpus_path = match corpus {
        Some(p) => p,
        None => cfg.corpus_path()?,
    };
    let mut corpus = load_nonempty(corpus_path)?;
    log.input(corpus_path)?;
    record_config_inputs(cfg, &mut log)?;
    let judge = build_judge(cfg, out)?;
    let result = annotate_corpus(&mut corpus, &judge);
    let output = out.join(ANNOTATED);
    save_corpus(&corpus, &output)?;
    let newly_annotated = result?;
    log.output(ANNOTATED);
    log.finish(out, "annotate")?;
    let count = |c: Criticality| corpus.samples.iter().filter(|s| s.criticality == c).count();
    Ok(AnnotateReport {
        output,
        newly_annotated,
        critical: count(Criticality::Critical),
        normal: count(Criticality::Normal),
        remote_requests: judge.remote_requests(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploreReport {
    pub scores: PathBuf,
    pub subset: PathBuf,
    pub ranked: usize,
    pub selected: usize,
}

/// Default corpus for later stages: the annotated copy when present.
fn stage_corpus(cfg: &RunConfig, out: &Path, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let annotated = out.join(ANNOTATED);
    if annotated.is_file() {
        return Ok(annotated);
    }
    Ok(cfg.corpus_path()?.to_path_buf())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Ranks the training part by greedy-prediction quality and writes the
/// score table and the selected subset. `overrides` replaces predictions
/// for the given ids.
pub fn cmd_explore(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    corpus: Option<&Path>,
    overrides: &BTreeMap<String, String>,
) -> Result<ExploreReport, CliError> {
    let out = cfg.out_dir()?;
    let _lock = OutLock::acquire(out)?;
    let mut log = StageLog::start(cfg.hash());
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(SFT_CHECKPOINT));
    let ckpt = load_checkpoint(&ckpt_path)?;
    log.input(&ckpt_path)?;
    let corpus_path = stage_corpus(cfg, out, corpus)?;
    let full = load_nonempty(&corpus_path)?;
    log.input(&corpus_path)?;
    record_config_inputs(cfg, &mut log)?;
    let train = training_part(&full, cfg.held_out)?;

    let explore_cfg = ExploreConfig {
        mode: cfg.explore.mode()?,
        weights: cfg.explore.weights,
        lexicon: cfg.lexicon()?,
        headers: SectionHeaders::default(),
        max_len: cfg.capo.max_len,
    };
    let (subset, records) = run_target_exploration(&ckpt.params, &ckpt.codec, &train, &explore_cfg, overrides)?;
    let mut csv = Vec::new();
    write_scores_csv(&records, &mut csv)?;
    let scores = out.join(SCORES);
    write_atomic(&scores, &csv)?;
    let subset_path = out.join(SUBSET);
    save_corpus(&subset, &subset_path)?;
    log.output(SCORES);
    log.output(SUBSET);
    log.finish(out, "explore")?;
    Ok(ExploreReport {
        scores,
        subset: subset_path,
        ranked: records.len(),
        selected: subset.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps_run: u64,
    pub resumed_from: Option<u64>,
    pub skipped_samples: usize,
    pub final_mean_reward: f64,
}

fn step_checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

/// Highest-step intermediate checkpoint in `dir`.
fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>, CliError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let path = entry.map_err(CliError::io(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let step = name
            .strip_prefix("step-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Drops log rows at or after `step` so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Policy optimization on the selected subset, starting from (and
/// regularized toward) the sft checkpoint.
pub fn cmd_train(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    subset: Option<&Path>,
    resume: bool,
) -> Result<TrainReport, CliError> {
    let out = cfg.out_dir()?;
    let _lock = OutLock::acquire(out)?;
    let mut log = StageLog::start(cfg.hash());
    let init_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(SFT_CHECKPOINT));
    let init = load_checkpoint(&init_path)?;
    log.input(&init_path)?;
    let subset_path = subset.map(Path::to_path_buf).unwrap_or_else(|| out.join(SUBSET));
    let subset = load_nonempty(&subset_path)?;
    log.input(&subset_path)?;
    record_config_inputs(cfg, &mut log)?;
    if let Some(s) = subset.samples.iter().find(|s| s.criticality == Criticality::Unannotated) {
        return Err(CliError::Data(format!(
            "sample {:?} has no criticality label; run `annotate` first",
            s.id
        )));
    }
    let reward = cfg.reward_config()?;
    let judge = build_judge(cfg, out)?;
    let ctx = TrainContext {
        codec: &init.codec,
        reward: &reward,
        judge: &judge,
    };

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let log_path = out.join(TRAIN_LOG);
    let resume_point = if resume { latest_checkpoint(&ckpt_dir)? } else { None };
    let (mut trainer, resumed_from) = match resume_point {
        Some((step, path)) if log_path.is_file() => {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.codec != init.codec {
                return Err(CliError::Data(format!(
                    "{} was trained with a different vocabulary or class map",
                    path.display()
                )));
            }
            let rng = ckpt
                .rng
                .as_ref()
                .and_then(RngState::restore)
                .ok_or_else(|| CliError::Data(format!("{} has no RNG state", path.display())))?;
            truncate_log(&log_path, step)?;
            let t = Trainer::resume(ckpt.params, snapshot(&init.params), cfg.capo.clone(), rng, step)?;
            (t, Some(step))
        }
        _ => {
            if ckpt_dir.is_dir() {
                std::fs::remove_dir_all(&ckpt_dir).map_err(CliError::io(&ckpt_dir))?;
            }
            (Trainer::new(init.params.clone(), cfg.capo.clone())?, None)
        }
    };
    std::fs::create_dir_all(&ckpt_dir).map_err(CliError::io(&ckpt_dir))?;

    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed_from.is_some())
        .truncate(resumed_from.is_none())
        .open(&log_path)
        .map_err(CliError::io(&log_path))?;
    let mut train_log = TrainingLog::new(file, resumed_from.is_none())?;

    let save = |trainer: &Trainer<PolicyParams>, path: &Path| -> Result<(), CliError> {
        Checkpoint {
            params: trainer.policy.clone(),
            codec: init.codec.clone(),
            step: trainer.step,
            rng: Some(RngState::capture(&trainer.rng)),
        }
        .save(path)?;
        Ok(())
    };

    let start = trainer.step;
    let mut skipped = 0usize;
    let mut rewards = Vec::new();
    let every = cfg.capo.checkpoint_every as u64;
    while !trainer.is_done() {
        let stats = trainer.step(&subset, ctx)?;
        train_log.append(&stats)?;
        let failed: Vec<&str> = stats.samples.iter().filter_map(|s| s.skipped.as_deref()).collect();
        skipped += failed.len();
        if !failed.is_empty() && failed.len() == stats.samples.len() {
            return Err(CliError::Judge(format!(
                "step {} could not score any sample ({}); rerun with --resume",
                stats.step, failed[0]
            )));
        }
        rewards.push(stats.mean_reward);
        if every > 0 && trainer.step % every == 0 {
            save(&trainer, &ckpt_dir.join(step_checkpoint_name(trainer.step)))?;
        }
    }
    let final_path = out.join(FINAL_CHECKPOINT);
    save(&trainer, &final_path)?;

    let mut outputs: Vec<String> = vec![TRAIN_LOG.into(), FINAL_CHECKPOINT.into()];
    if every > 0 {
        let mut s = every;
        while s <= trainer.step {
            outputs.push(rel(out, &ckpt_dir.join(step_checkpoint_name(s))));
            s += every;
        }
    }
    for o in outputs {
        log.output(o);
    }
    log.finish(out, "train")?;

    let tail = &rewards[rewards.len() - rewards.len().div_ceil(10)..];
    let finite: Vec<f64> = tail.iter().copied().filter(|x| x.is_finite()).collect();
    Ok(TrainReport {
        checkpoint: final_path,
        log: log_path,
        steps_run: trainer.step - start,
        resumed_from,
        skipped_samples: skipped,
        final_mean_reward: if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub sample_id: String,
    pub criticality: Criticality,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub semantic: f64,
    pub keyword_f1: f64,
    pub r_syntax: f64,
    pub r_domain: f64,
    pub r_consistent: Option<f64>,
    pub r_imp: Option<f64>,
    pub total: f64,
    pub fallback_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMeans {
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub semantic: f64,
    pub keyword_f1: f64,
    pub r_syntax: f64,
    pub r_domain: f64,
    /// Over samples where the consistency reward applies.
    pub r_consistent: Option<f64>,
    /// Over samples where the Impression reward applies.
    pub r_imp: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub corpus: String,
    pub samples: usize,
    pub means: EvalMeans,
    /// Fraction of all samples judged consistent (+1).
    pub consistency_plus_rate: f64,
    pub fallback_rate: f64,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Scores greedy predictions of `ckpt` on `corpus`.
pub fn evaluate(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    cfg: &RunConfig,
    judge: &Judge,
) -> Result<(Vec<EvalRow>, EvalMeans, f64, f64), CliError> {
    let reward = cfg.reward_config()?;
    let lexicon = &reward.lexicon;
    let codec = &ckpt.codec;
    let mut rows = Vec::with_capacity(corpus.len());
    for s in &corpus.samples {
        let ids = greedy_decode(
            &ckpt.params,
            codec.class_of(&s.prompt),
            codec.vocab.bos(),
            codec.vocab.eos(),
            cfg.capo.max_len,
        );
        let pred = codec.decode(&ids);
        let (c, r) = (tokenize(&pred), tokenize(&s.reference.full_text));
        let b = total_reward(&pred, &s.reference, &reward, judge)?;
        rows.push(EvalRow {
            sample_id: s.id.clone(),
            criticality: s.criticality,
            bleu2: bleu_n(&c, &r, 2, true).map_err(|e| CliError::Data(e.to_string()))?,
            bleu4: bleu_n(&c, &r, 4, true).map_err(|e| CliError::Data(e.to_string()))?,
            rouge_l: rouge_l(&c, &r).map_err(|e| CliError::Data(e.to_string()))?,
            semantic: semantic_proxy(&c, &r),
            keyword_f1: keyword_match(&pred, &s.reference.full_text, lexicon)
                .map_err(|e| CliError::Data(e.to_string()))?,
            r_syntax: b.r_syntax,
            r_domain: b.r_domain,
            r_consistent: b.r_consistent,
            r_imp: b.r_imp,
            total: b.total,
            fallback_applied: b.fallback_applied,
        });
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let means = EvalMeans {
        bleu2: avg(|r| r.bleu2),
        bleu4: avg(|r| r.bleu4),
        rouge_l: avg(|r| r.rouge_l),
        semantic: avg(|r| r.semantic),
        keyword_f1: avg(|r| r.keyword_f1),
        r_syntax: avg(|r| r.r_syntax),
        r_domain: avg(|r| r.r_domain),
        r_consistent: mean_of(rows.iter().filter_map(|r| r.r_consistent)),
        r_imp: mean_of(rows.iter().filter_map(|r| r.r_imp)),
        total: avg(|r| r.total),
    };
    let plus = rows.iter().filter(|r| r.r_consistent == Some(1.0)).count() as f64 / n;
    let fallback = rows.iter().filter(|r| r.fallback_applied).count() as f64 / n;
    Ok((rows, means, plus, fallback))
}

fn write_eval_csv(rows: &[EvalRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(EVAL_COLUMNS)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.sample_id.clone(),
            r.criticality.to_string(),
            r.bleu2.to_string(),
            r.bleu4.to_string(),
            r.rouge_l.to_string(),
            r.semantic.to_string(),
            r.keyword_f1.to_string(),
            r.r_syntax.to_string(),
            r.r_domain.to_string(),
            opt(r.r_consistent),
            opt(r.r_imp),
            r.total.to_string(),
            r.fallback_applied.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

/// Evaluates a checkpoint and writes `eval-<tag>.json` and `eval-<tag>.csv`.
/// Without an explicit corpus the held-out part of the run corpus is used
/// (the whole corpus when nothing is held out).
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    corpus: Option<&Path>,
    tag: Option<&str>,
) -> Result<EvalReport, CliError> {
    let out = cfg.out_dir()?;
    let _lock = OutLock::acquire(out)?;
    let mut log = StageLog::start(cfg.hash());
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(FINAL_CHECKPOINT));
    let ckpt = load_checkpoint(&ckpt_path)?;
    log.input(&ckpt_path)?;
    let (corpus_path, eval_corpus) = match corpus {
        Some(p) => (p.to_path_buf(), load_nonempty(p)?),
        None => {
            let p = stage_corpus(cfg, out, None)?;
            let full = load_nonempty(&p)?;
            let part = match cfg.held_out {
                0 => full,
                h if h < full.len() => split(&full, h).1,
                h => return Err(CliError::Config(format!("held_out = {h} exceeds the corpus size {}", full.len()))),
            };
            (p, part)
        }
    };
    log.input(&corpus_path)?;
    record_config_inputs(cfg, &mut log)?;
    let judge = build_judge(cfg, out)?;
    let (rows, means, plus, fallback) = evaluate(&ckpt, &eval_corpus, cfg, &judge)?;
    let report = EvalReport {
        checkpoint: ckpt_path.display().to_string(),
        corpus: corpus_path.display().to_string(),
        samples: rows.len(),
        means,
        consistency_plus_rate: plus,
        fallback_rate: fallback,
    };
    let tag = match tag {
        Some(t) => t.to_string(),
        None => ckpt_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint")
            .to_string(),
    };
    let (json_name, csv_name) = (format!("eval-{tag}.json"), format!("eval-{tag}.csv"));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out.join(&json_name), json.as_bytes())?;
    write_atomic(&out.join(&csv_name), &write_eval_csv(&rows)?)?;
    log.output(json_name);
    log.output(csv_name);
    log.finish(out, &format!("eval-{tag}"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropositionSummary {
    pub trials: usize,
    pub eps: f64,
    pub max_dj: f64,
    pub max_ratio_of_bound: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub lemma: LemmaReport,
    pub proposition: PropositionSummary,
}

impl TheoryReport {
    pub fn violations(&self) -> usize {
        self.lemma.violations + self.proposition.violations
    }
}

/// Randomized checks of both stability bounds plus a clipping-range sweep.
/// Outputs are written before a violation is reported. `dj_scale` multiplies
/// every measured return gap and exists to exercise the failure path.
pub fn cmd_verify_theory(cfg: &RunConfig, dj_scale: f64) -> Result<TheoryReport, CliError> {
    let out = cfg.out_dir()?;
    let _lock = OutLock::acquire(out)?;
    let mut log = StageLog::start(cfg.hash());
    let t = &cfg.theory;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lemma = verify_lemma(t.trials, t.max_states, t.max_actions, t.eps, &mut rng)?;
    let setup = PropositionSetup {
        r_max: t.r_max,
        dj_scale,
        ..PropositionSetup::new(t.trials, t.max_states, t.max_actions, t.gamma, t.eps)
    };
    let prop = verify_proposition(&setup, &mut rng)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &prop.records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&out.join(THEORY_CSV), &bytes)?;

    let sweep = capo_tightness_experiment(&TightnessConfig {
        eps_normal: cfg.capo.eps_normal,
        divisor: cfg.capo.eps_critical_divisor,
        grid: t.grid.clone(),
        trials: t.sweep_trials,
        max_states: t.max_states,
        max_actions: t.max_actions,
        r_max: t.r_max,
        gamma_discount: t.gamma,
        seed: cfg.seed,
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &sweep {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&out.join(TIGHTNESS_CSV), &bytes)?;

    let report = TheoryReport {
        lemma,
        proposition: PropositionSummary {
            trials: prop.trials,
            eps: prop.eps,
            max_dj: prop.max_dj,
            max_ratio_of_bound: prop.max_ratio_of_bound,
            violations: prop.violations,
        },
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out.join(THEORY_SUMMARY), json.as_bytes())?;
    for o in [THEORY_CSV, TIGHTNESS_CSV, THEORY_SUMMARY] {
        log.output(o);
    }
    log.finish(out, "verify-theory")?;
    if report.violations() > 0 {
        return Err(CliError::Theory(format!(
            "{} lemma and {} proposition violation(s) out of {} trials each",
            report.lemma.violations, report.proposition.violations, t.trials
        )));
    }
    Ok(report)
}

/// Writes a synthetic corpus of `n` samples.
pub fn cmd_gen_fixture(n: usize, seed: u64, path: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("fixture size must be >= 1".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    save_corpus(&synthetic_corpus(n, seed), path)?;
    Ok(())
}

/// Reads a JSON object of sample id to replacement prediction.
pub fn load_overrides(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
