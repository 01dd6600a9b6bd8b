//! Hierarchical alignment reward.
//!
//! ```text
//! total  = global + gamma * impression
//! global = syntax + domain + consistency
//! ```
//!
//! `consistency` is the judge verdict mapped to +1 / -1 and is only
//! computed when both sections parse. `impression` is the macro F1 of the
//! labeler over the two Impression sections; it is skipped (fallback) when
//! either side has no Impression, in which case `total = global`.

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_sections_with, ParseStatus, SectionHeaders, SectionedReport};
use crate::judge::{Judge, JudgeError};
use crate::metrics::{
    binarize, bleu_n, extract_labels, keyword_match, macro_f1, rouge_l, tokenize, LabelLexicon,
    MetricError, DEFAULT_THRESHOLD,
};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid reward config: {0}")]
    Config(String),
}

/// Per-term weights inside the global reward. All default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalWeights {
    pub syntax: f64,
    pub domain: f64,
    pub consistent: f64,
}

impl Default for GlobalWeights {
    fn default() -> Self {
        Self {
            syntax: 1.0,
            domain: 1.0,
            consistent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// Weight of the Impression reward.
    pub gamma: f64,
    pub weights: GlobalWeights,
    pub lexicon: LabelLexicon,
    pub threshold: f64,
    pub headers: SectionHeaders,
}

impl RewardConfig {
    pub fn new(lexicon: LabelLexicon) -> Self {
        Self {
            gamma: 1.0,
            weights: GlobalWeights::default(),
            lexicon,
            threshold: DEFAULT_THRESHOLD,
            headers: SectionHeaders::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(RewardError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(RewardError::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        let w = self.weights;
        if [w.syntax, w.domain, w.consistent].iter().any(|x| !(*x >= 0.0)) {
            return Err(RewardError::Config("global weights must be >= 0".into()));
        }
        self.lexicon.validate()?;
        Ok(())
    }
}

/// All reward components for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_syntax: f64,
    pub r_domain: f64,
    pub r_consistent: Option<f64>,
    pub r_imp: Option<f64>,
    pub r_global: f64,
    pub total: f64,
    pub fallback_applied: bool,
}

impl RewardBreakdown {
    /// Assembles a breakdown from its components, enforcing the sum rules.
    pub fn compose(
        r_syntax: f64,
        r_domain: f64,
        r_consistent: Option<f64>,
        r_imp: Option<f64>,
        gamma: f64,
        weights: GlobalWeights,
    ) -> Self {
        let r_global = weights.syntax * r_syntax
            + weights.domain * r_domain
            + weights.consistent * r_consistent.unwrap_or(0.0);
        let total = match r_imp {
            Some(imp) => r_global + gamma * imp,
            None => r_global,
        };
        Self {
            r_syntax,
            r_domain,
            r_consistent,
            r_imp,
            r_global,
            total,
            fallback_applied: r_imp.is_none(),
        }
    }
}

/// Mean of smoothed BLEU-2 and ROUGE-L over full texts.
pub fn r_syntax(candidate: &SectionedReport, reference: &SectionedReport) -> Result<f64, RewardError> {
    let c = tokenize(&candidate.full_text);
    let r = tokenize(&reference.full_text);
    let bleu = bleu_n(&c, &r, 2, true)?;
    let rouge = rouge_l(&c, &r)?;
    Ok(0.5 * (bleu + rouge))
}

/// Key-term agreement over the Findings sections, falling back to the full
/// text on any side without parsed Findings.
pub fn r_domain(
    candidate: &SectionedReport,
    reference: &SectionedReport,
    lexicon: &LabelLexicon,
) -> Result<f64, RewardError> {
    Ok(keyword_match(
        candidate.findings_or_full(),
        reference.findings_or_full(),
        lexicon,
    )?)
}

/// +1 / -1 judge verdict, or `None` when the candidate lacks either section.
pub fn r_consistent(candidate: &SectionedReport, judge: &Judge) -> Result<Option<f64>, RewardError> {
    match (candidate.parse_status, &candidate.findings, &candidate.impression) {
        (ParseStatus::BothFound, Some(f), Some(i)) => {
            let v = judge.judge_consistency(f, i)?;
            Ok(Some(if v.consistent { 1.0 } else { -1.0 }))
        }
        _ => Ok(None),
    }
}

/// Macro F1 between binarized label vectors of the two Impressions, or
/// `None` when either Impression is missing.
pub fn r_impression(
    candidate: &SectionedReport,
    reference: &SectionedReport,
    lexicon: &LabelLexicon,
    threshold: f64,
) -> Result<Option<f64>, RewardError> {
    let (Some(c), Some(r)) = (&candidate.impression, &reference.impression) else {
        return Ok(None);
    };
    let pc = binarize(&extract_labels(c, lexicon)?, threshold);
    let pr = binarize(&extract_labels(r, lexicon)?, threshold);
    Ok(Some(macro_f1(&pc, &pr)?))
}

/// Full hierarchical reward for one generated report.
pub fn total_reward(
    candidate_text: &str,
    reference: &SectionedReport,
    cfg: &RewardConfig,
    judge: &Judge,
) -> Result<RewardBreakdown, RewardError> {
    let candidate = parse_sections_with(candidate_text, &cfg.headers);
    let syntax = r_syntax(&candidate, reference)?;
    let domain = r_domain(&candidate, reference, &cfg.lexicon)?;
    let consistent = r_consistent(&candidate, judge)?;
    let imp = r_impression(&candidate, reference, &cfg.lexicon, cfg.threshold)?;
    Ok(RewardBreakdown::compose(
        syntax,
        domain,
        consistent,
        imp,
        cfg.gamma,
        cfg.weights,
    ))
}
