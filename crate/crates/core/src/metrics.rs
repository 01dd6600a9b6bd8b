//! Text-similarity and label-agreement metrics.
//!
//! Everything here is a pure function of its inputs except
//! [`PluginRegistry::external_metric`], which shells out to an external
//! scorer so heavyweight model-based metrics can be attached without a
//! build-time dependency.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("reference must be nonempty")]
    EmptyReference,
    #[error("n-gram order must be >= 1")]
    InvalidOrder,
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label vectors must be nonempty")]
    EmptyLabels,
    #[error("label lexicon is empty")]
    EmptyLexicon,
    #[error("label {0:?} has no trigger phrases")]
    EmptyTriggers(String),
    #[error("no metric plugin registered under {0:?}")]
    PluginNotRegistered(String),
    #[error("metric {name:?} unavailable: {reason}")]
    Unavailable { name: String, reason: String },
}

/// Punctuation detached into standalone tokens by [`tokenize`].
const DETACHED: &[char] = &['.', ',', ';', ':', '!', '?'];

/// Lowercased token sequence produced by [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&str> for TokenSeq {
    fn from(text: &str) -> Self {
        tokenize(text)
    }
}

/// Canonical tokenizer: lowercase, detach `.,;:!?`, split on whitespace.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut spaced = String::with_capacity(text.len() + 16);
    for ch in text.chars() {
        if DETACHED.contains(&ch) {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.extend(ch.to_lowercase());
        }
    }
    TokenSeq(spaced.split_whitespace().map(str::to_owned).collect())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU over orders `1..=min(n, |candidate|)` with brevity penalty.
///
/// With `smoothing`, an order whose clipped match count is zero uses
/// `(0 + 1) / (total + 1)`; without it any zero precision gives 0.
pub fn bleu_n(
    candidate: &TokenSeq,
    reference: &TokenSeq,
    n: usize,
    smoothing: bool,
) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let (c, r) = (candidate.tokens(), reference.tokens());
    // orders longer than the candidate are skipped (effective order)
    let orders = n.min(c.len());
    let mut log_sum = 0.0;
    for k in 1..=orders {
        let cand = ngram_counts(c, k);
        let refc = ngram_counts(r, k);
        let total = (c.len() - (k - 1)) as f64;
        let matched: usize = cand
            .iter()
            .map(|(g, &cnt)| cnt.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            if !smoothing {
                return Ok(0.0);
            }
            1.0 / (total + 1.0)
        } else {
            matched as f64 / total
        };
        log_sum += p.ln();
    }
    let (cl, rl) = (c.len() as f64, r.len() as f64);
    let bp = if cl >= rl { 1.0 } else { (1.0 - rl / cl).exp() };
    Ok((bp * (log_sum / orders as f64).exp()).clamp(0.0, 1.0))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1).
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate.tokens(), reference.tokens()) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Cosine similarity of bag-of-token count vectors.
pub fn semantic_proxy(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    fn count(s: &TokenSeq) -> BTreeMap<&str, f64> {
        let mut m = BTreeMap::new();
        for t in s.tokens() {
            *m.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        m
    }
    let (a, b) = (count(candidate), count(reference));
    let dot: f64 = a
        .iter()
        .filter_map(|(k, x)| b.get(k).map(|y| x * y))
        .sum();
    // an empty float sum is -0.0
    if dot == 0.0 {
        return 0.0;
    }
    let norm = |m: &BTreeMap<&str, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (norm(&a) * norm(&b))).clamp(0.0, 1.0)
}

/// One label of a [`LabelLexicon`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    pub triggers: Vec<String>,
}

fn default_negations() -> Vec<String> {
    vec!["no".into(), "without".into(), "absent".into()]
}

fn default_window() -> usize {
    3
}

/// Keyword labeler configuration: labels with trigger phrases plus
/// negation cues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLexicon {
    pub labels: Vec<LabelDef>,
    #[serde(default = "default_negations")]
    pub negations: Vec<String>,
    #[serde(default = "default_window")]
    pub negation_window: usize,
}

impl LabelLexicon {
    pub fn new<S: AsRef<str>>(labels: &[(&str, &[S])]) -> Self {
        Self {
            labels: labels
                .iter()
                .map(|(name, triggers)| LabelDef {
                    name: (*name).to_string(),
                    triggers: triggers.iter().map(|t| t.as_ref().to_string()).collect(),
                })
                .collect(),
            negations: default_negations(),
            negation_window: default_window(),
        }
    }

    /// Carotid ultrasound label set used by the synthetic grammar.
    pub fn carotid() -> Self {
        Self::new(&[
            ("plaque", &["plaque", "atheroma"][..]),
            ("soft_plaque", &["soft plaque", "hypoechoic plaque", "soft atheroma"][..]),
            ("hard_plaque", &["hard plaque", "calcified plaque", "hard atheroma"][..]),
            ("mixed_plaque", &["mixed plaque", "heterogeneous plaque", "mixed atheroma"][..]),
            ("stenosis", &["stenosis", "stenotic"][..]),
            ("intima_thickening", &["intima thickening", "thickened intima"][..]),
            ("occlusion", &["occlusion", "occluded"][..]),
        ])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.labels.is_empty() {
            return Err(MetricError::EmptyLexicon);
        }
        for l in &self.labels {
            if l.triggers.iter().all(|t| label_words(t).is_empty()) {
                return Err(MetricError::EmptyTriggers(l.name.clone()));
            }
        }
        Ok(())
    }
}

/// Label probabilities, parallel to `label_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    pub values: Vec<f64>,
    pub label_names: Vec<String>,
}

/// Token stream for phrase matching: words, plus punctuation that breaks
/// phrases. Sentence-level breaks also end the negation scope.
#[derive(Debug, Clone, PartialEq)]
enum LabelTok {
    Word(String),
    Break { sentence: bool },
}

fn label_stream(text: &str) -> Vec<LabelTok> {
    tokenize(text)
        .0
        .into_iter()
        .map(|t| {
            let w = t.trim_matches(|c: char| !c.is_alphanumeric());
            if w.is_empty() {
                LabelTok::Break {
                    sentence: t.contains(['.', ';', ':', '!', '?']),
                }
            } else {
                LabelTok::Word(w.to_string())
            }
        })
        .collect()
}

fn label_words(text: &str) -> Vec<String> {
    label_stream(text)
        .into_iter()
        .filter_map(|t| match t {
            LabelTok::Word(w) => Some(w),
            LabelTok::Break { .. } => None,
        })
        .collect()
}

fn is_negated(stream: &[LabelTok], start: usize, lexicon: &LabelLexicon) -> bool {
    let mut words = 0;
    for tok in stream[..start].iter().rev() {
        match tok {
            LabelTok::Break { sentence: true } => return false,
            LabelTok::Break { sentence: false } => {}
            LabelTok::Word(w) => {
                if words == lexicon.negation_window {
                    return false;
                }
                words += 1;
                if lexicon.negations.iter().any(|n| n == w) {
                    return true;
                }
            }
        }
    }
    false
}

fn phrase_fires(stream: &[LabelTok], phrase: &[String], lexicon: &LabelLexicon) -> bool {
    if phrase.is_empty() || stream.len() < phrase.len() {
        return false;
    }
    (0..=stream.len() - phrase.len()).any(|start| {
        let matches = phrase
            .iter()
            .zip(&stream[start..])
            .all(|(p, t)| matches!(t, LabelTok::Word(w) if w == p));
        matches && !is_negated(stream, start, lexicon)
    })
}

/// Lexicon-based labeler: 1.0 for a label iff one of its trigger phrases
/// occurs contiguously and is not preceded (within the negation window, in
/// the same sentence) by a negation cue.
pub fn extract_labels(text: &str, lexicon: &LabelLexicon) -> Result<LabelVector, MetricError> {
    lexicon.validate()?;
    let stream = label_stream(text);
    let values = lexicon
        .labels
        .iter()
        .map(|label| {
            let fired = label
                .triggers
                .iter()
                .any(|t| phrase_fires(&stream, &label_words(t), lexicon));
            if fired {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(LabelVector {
        values,
        label_names: lexicon.label_names(),
    })
}

/// Elementwise `v >= threshold`.
pub fn binarize(v: &LabelVector, threshold: f64) -> Vec<bool> {
    v.values.iter().map(|&x| x >= threshold).collect()
}

/// Unweighted mean of per-label F1. A label negative on both sides scores
/// 1.0.
pub fn macro_f1(pred: &[bool], reference: &[bool]) -> Result<f64, MetricError> {
    if pred.len() != reference.len() {
        return Err(MetricError::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyLabels);
    }
    let total: f64 = pred
        .iter()
        .zip(reference)
        .map(|(&p, &r)| {
            let tp = (p && r) as u32 as f64;
            let fp = (p && !r) as u32 as f64;
            let fn_ = (!p && r) as u32 as f64;
            if tp + fp + fn_ == 0.0 {
                1.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Default binarization threshold (inclusive).
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Key-term agreement: macro F1 between the label sets of both texts.
pub fn keyword_match(
    candidate: &str,
    reference: &str,
    lexicon: &LabelLexicon,
) -> Result<f64, MetricError> {
    let c = binarize(&extract_labels(candidate, lexicon)?, DEFAULT_THRESHOLD);
    let r = binarize(&extract_labels(reference, lexicon)?, DEFAULT_THRESHOLD);
    macro_f1(&c, &r)
}

/// A named metric value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
}

/// An external scorer. It receives `{"candidate": .., "reference": ..}` on
/// stdin and must print one number in `[0, 1]` and exit 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricPlugin {
    pub command: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_plugin_timeout")]
    pub timeout_secs: f64,
}

fn default_plugin_timeout() -> f64 {
    10.0
}

impl MetricPlugin {
    pub fn new(command: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            args: Vec::new(),
            timeout_secs: default_plugin_timeout(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, MetricPlugin>,
    parallelism: usize,
}

impl Default for PluginRegistry {
    fn default() -> Self {
        Self {
            plugins: BTreeMap::new(),
            parallelism: 4,
        }
    }
}

impl PluginRegistry {
    pub fn new(parallelism: usize) -> Self {
        Self {
            plugins: BTreeMap::new(),
            parallelism: parallelism.max(1),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, plugin: MetricPlugin) {
        self.plugins.insert(name.into(), plugin);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.plugins.keys().map(String::as_str)
    }

    pub fn external_metric(
        &self,
        name: &str,
        candidate: &str,
        reference: &str,
    ) -> Result<MetricValue, MetricError> {
        let plugin = self
            .plugins
            .get(name)
            .ok_or_else(|| MetricError::PluginNotRegistered(name.to_string()))?;
        let value = run_plugin(plugin, candidate, reference).map_err(|reason| {
            MetricError::Unavailable {
                name: name.to_string(),
                reason,
            }
        })?;
        Ok(MetricValue {
            name: name.to_string(),
            value,
        })
    }

    /// Scores many pairs, running at most `parallelism` plugin processes at
    /// once. Results are in input order.
    pub fn external_metric_batch(
        &self,
        name: &str,
        pairs: &[(String, String)],
    ) -> Vec<Result<MetricValue, MetricError>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.parallelism) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(c, r)| s.spawn(move || self.external_metric(name, c, r)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("plugin worker panicked"))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}

fn run_plugin(plugin: &MetricPlugin, candidate: &str, reference: &str) -> Result<f64, String> {
    let payload = serde_json::json!({ "candidate": candidate, "reference": reference }).to_string();
    let mut child = Command::new(&plugin.command)
        .args(&plugin.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| format!("spawn failed: {e}"))?;

    let mut stdin = child.stdin.take().expect("stdin piped");
    let writer = std::thread::spawn(move || {
        // A plugin that ignores stdin may close it early; that is not an error.
        let _ = stdin.write_all(payload.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("stdout piped");
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        stdout.read_to_string(&mut buf).map(|_| buf)
    });

    let deadline = Instant::now() + Duration::from_secs_f64(plugin.timeout_secs.max(0.0));
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("timed out after {}s", plugin.timeout_secs));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(format!("wait failed: {e}")),
        }
    };
    let _ = writer.join();
    let output = reader
        .join()
        .map_err(|_| "reader panicked".to_string())?
        .map_err(|e| format!("reading stdout: {e}"))?;
    if !status.success() {
        return Err(format!("exited with {status}"));
    }
    let value: f64 = output
        .trim()
        .parse()
        .map_err(|_| format!("unparseable output {:?}", output.trim()))?;
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(format!("value {value} outside [0, 1]"));
    }
    Ok(value)
}
