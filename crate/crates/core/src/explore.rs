//! Target exploration: score greedy predictions of the starting policy,
//! rank them, and keep the hardest samples for fine-tuning.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_sections_with, Corpus, SectionHeaders, SectionedReport};
use crate::metrics::{bleu_n, keyword_match, semantic_proxy, tokenize, LabelLexicon, MetricError};
use crate::policy::{greedy_decode, Policy, ReportCodec};

#[derive(Debug, thiserror::Error)]
pub enum ExploreError {
    #[error("nothing to rank")]
    Empty,
    #[error("invalid selection: {0}")]
    Selection(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("score CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Greedy prediction for every sample, keyed by id.
pub fn predict_corpus<P: Policy + ?Sized>(
    policy: &P,
    codec: &ReportCodec,
    corpus: &Corpus,
    max_len: usize,
) -> BTreeMap<String, String> {
    let (bos, eos) = (codec.vocab.bos(), codec.vocab.eos());
    corpus
        .samples
        .iter()
        .map(|s| {
            let ids = greedy_decode(policy, codec.class_of(&s.prompt), bos, eos, max_len);
            (s.id.clone(), codec.decode(&ids))
        })
        .collect()
}

/// Raw constituent metrics of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub bleu2: f64,
    pub semantic: f64,
    pub domain: f64,
}

impl MetricTriple {
    fn get(&self, i: usize) -> f64 {
        [self.bleu2, self.semantic, self.domain][i]
    }
}

/// Unsmoothed BLEU-2 and bag-of-words cosine over full texts; key-term
/// agreement over Findings (full text when absent).
pub fn composite_score(
    prediction: &str,
    reference: &SectionedReport,
    lexicon: &LabelLexicon,
    headers: &SectionHeaders,
) -> Result<MetricTriple, ExploreError> {
    let cand = parse_sections_with(prediction, headers);
    let c = tokenize(&cand.full_text);
    let r = tokenize(&reference.full_text);
    Ok(MetricTriple {
        bleu2: bleu_n(&c, &r, 2, false)?,
        semantic: semantic_proxy(&c, &r),
        domain: keyword_match(cand.findings_or_full(), reference.findings_or_full(), lexicon)?,
    })
}

/// Weights of the three normalized metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub bleu2: f64,
    pub semantic: f64,
    pub domain: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            bleu2: 1.0,
            semantic: 1.0,
            domain: 1.0,
        }
    }
}

/// Per-column min-max normalization (a constant column maps to 0.5), then a
/// weighted mean.
pub fn aggregate_scores(records: &[MetricTriple], weights: ScoreWeights) -> Result<Vec<f64>, ExploreError> {
    if records.is_empty() {
        return Err(ExploreError::Empty);
    }
    let w = [weights.bleu2, weights.semantic, weights.domain];
    let wsum: f64 = w.iter().sum();
    if w.iter().any(|x| !(*x >= 0.0)) || !(wsum > 0.0) {
        return Err(ExploreError::Weights(format!("{w:?}")));
    }
    let mut s = vec![0.0; records.len()];
    for (col, wc) in w.iter().enumerate() {
        let lo = records.iter().map(|r| r.get(col)).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.get(col)).fold(f64::NEG_INFINITY, f64::max);
        for (acc, r) in s.iter_mut().zip(records) {
            let norm = if hi > lo { (r.get(col) - lo) / (hi - lo) } else { 0.5 };
            *acc += wc * norm;
        }
    }
    Ok(s.into_iter().map(|x| x / wsum).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum SelectionMode {
    /// Lowest `ceil(N * k / 100)` scores, `k` in (0, 100].
    BottomPercent(f64),
    /// Scores strictly below the threshold.
    Threshold(f64),
}

impl Default for SelectionMode {
    fn default() -> Self {
        SelectionMode::BottomPercent(10.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub bleu2: f64,
    pub semantic: f64,
    pub domain: f64,
    pub s: f64,
    pub rank: usize,
    pub selected: bool,
}

/// Ascending sort by score, ties by id. Returned in rank order.
pub fn rank_and_select(
    scores: &[(String, f64)],
    mode: SelectionMode,
) -> Result<Vec<(String, f64, usize, bool)>, ExploreError> {
    if scores.is_empty() {
        return Err(ExploreError::Empty);
    }
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let cutoff = match mode {
        SelectionMode::BottomPercent(k) => {
            if !(k > 0.0 && k <= 100.0) {
                return Err(ExploreError::Selection(format!("k = {k} outside (0, 100]")));
            }
            Some((order.len() as f64 * k / 100.0).ceil() as usize)
        }
        SelectionMode::Threshold(tau) => {
            if !tau.is_finite() {
                return Err(ExploreError::Selection(format!("tau = {tau} is not finite")));
            }
            None
        }
    };
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, (id, s))| {
            let rank = i + 1;
            let selected = match (mode, cutoff) {
                (_, Some(c)) => rank <= c,
                (SelectionMode::Threshold(tau), None) => *s < tau,
                _ => unreachable!(),
            };
            (id.clone(), *s, rank, selected)
        })
        .collect())
}

/// Exploration settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExploreConfig {
    pub mode: SelectionMode,
    pub weights: ScoreWeights,
    pub lexicon: LabelLexicon,
    pub headers: SectionHeaders,
    pub max_len: usize,
}

impl ExploreConfig {
    pub fn new(lexicon: LabelLexicon) -> Self {
        Self {
            mode: SelectionMode::default(),
            weights: ScoreWeights::default(),
            lexicon,
            headers: SectionHeaders::default(),
            max_len: crate::policy::DEFAULT_MAX_LEN,
        }
    }
}

/// Scores every sample given its prediction.
pub fn score_predictions(
    corpus: &Corpus,
    predictions: &BTreeMap<String, String>,
    cfg: &ExploreConfig,
) -> Result<Vec<ScoreRecord>, ExploreError> {
    if corpus.is_empty() {
        return Err(ExploreError::Empty);
    }
    let mut triples = Vec::with_capacity(corpus.len());
    for s in &corpus.samples {
        let pred = predictions.get(&s.id).map(String::as_str).unwrap_or("");
        triples.push(composite_score(pred, &s.reference, &cfg.lexicon, &cfg.headers)?);
    }
    let s_values = aggregate_scores(&triples, cfg.weights)?;
    let pairs: Vec<(String, f64)> = corpus
        .samples
        .iter()
        .zip(&s_values)
        .map(|(s, v)| (s.id.clone(), *v))
        .collect();
    let by_id: BTreeMap<&str, MetricTriple> = corpus
        .samples
        .iter()
        .zip(&triples)
        .map(|(s, t)| (s.id.as_str(), *t))
        .collect();
    Ok(rank_and_select(&pairs, cfg.mode)?
        .into_iter()
        .map(|(id, s, rank, selected)| {
            let t = by_id[id.as_str()];
            ScoreRecord {
                sample_id: id,
                bleu2: t.bleu2,
                semantic: t.semantic,
                domain: t.domain,
                s,
                rank,
                selected,
            }
        })
        .collect())
}

/// Greedy predictions (optionally overridden per id), scoring, ranking and
/// selection. Returns the selected sub-corpus in rank order and all
/// records in rank order.
pub fn run_target_exploration<P: Policy + ?Sized>(
    policy: &P,
    codec: &ReportCodec,
    corpus: &Corpus,
    cfg: &ExploreConfig,
    overrides: &BTreeMap<String, String>,
) -> Result<(Corpus, Vec<ScoreRecord>), ExploreError> {
    let mut predictions = predict_corpus(policy, codec, corpus, cfg.max_len);
    for (id, text) in overrides {
        predictions.insert(id.clone(), text.clone());
    }
    let records = score_predictions(corpus, &predictions, cfg)?;
    let selected = records
        .iter()
        .filter(|r| r.selected)
        .filter_map(|r| corpus.get(&r.sample_id).cloned())
        .collect();
    let mut sub = Corpus::new(selected);
    sub.source_path = corpus.source_path.clone();
    Ok((sub, records))
}

pub const SCORE_COLUMNS: [&str; 7] = ["sample_id", "bleu2", "semantic", "domain", "s", "rank", "selected"];

pub fn write_scores_csv<W: Write>(records: &[ScoreRecord], out: W) -> Result<(), ExploreError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_COLUMNS)?;
    for r in records {
        w.write_record([
            r.sample_id.clone(),
            r.bleu2.to_string(),
            r.semantic.to_string(),
            r.domain.to_string(),
            r.s.to_string(),
            r.rank.to_string(),
            r.selected.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_sections, Sample};

    fn triple(b: f64, s: f64, d: f64) -> MetricTriple {
        MetricTriple {
            bleu2: b,
            semantic: s,
            domain: d,
        }
    }

    #[test]
    fn score_of_self_and_disjoint() {
        let lex = LabelLexicon::carotid();
        let h = SectionHeaders::default();
        let text = "FINDINGS: soft plaque seen.\nIMPRESSION: plaque.";
        let r = parse_sections(text);
        assert_eq!(composite_score(text, &r, &lex, &h).unwrap(), triple(1.0, 1.0, 1.0));
        let t = composite_score("zebra", &r, &lex, &h).unwrap();
        assert_eq!((t.bleu2, t.semantic), (0.0, 0.0));
        // empty prediction: no labels vs {plaque, soft_plaque} over 7
        // labels -> 5 absent-on-both of 7
        let t = composite_score("", &r, &lex, &h).unwrap();
        assert_eq!((t.bleu2, t.semantic), (0.0, 0.0));
        assert!((t.domain - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_conventions() {
        let w = ScoreWeights::default();
        assert_eq!(aggregate_scores(&[triple(0.3, 0.1, 0.9)], w).unwrap(), vec![0.5]);
        let s = aggregate_scores(&[triple(0.9, 0.8, 1.0), triple(0.1, 0.2, 0.5)], w).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
        assert!(aggregate_scores(&[], w).is_err());
    }

    #[test]
    fn bottom_k_and_threshold() {
        let scores: Vec<(String, f64)> = (0..20).map(|i| (format!("s{i:02}"), i as f64)).collect();
        let r = rank_and_select(&scores, SelectionMode::BottomPercent(10.0)).unwrap();
        assert_eq!(r.iter().filter(|x| x.3).count(), 2);
        let ties: Vec<(String, f64)> = (0..20).rev().map(|i| (format!("s{i:02}"), 0.5)).collect();
        let r = rank_and_select(&ties, SelectionMode::BottomPercent(10.0)).unwrap();
        let sel: Vec<&str> = r.iter().filter(|x| x.3).map(|x| x.0.as_str()).collect();
        assert_eq!(sel, ["s00", "s01"]);
        let r = rank_and_select(&scores, SelectionMode::Threshold(-1.0)).unwrap();
        assert!(r.iter().all(|x| !x.3));
        let r = rank_and_select(&scores, SelectionMode::Threshold(2.0)).unwrap();
        assert_eq!(r.iter().filter(|x| x.3).count(), 2);
        assert!(rank_and_select(&[], SelectionMode::default()).is_err());
        assert!(rank_and_select(&scores, SelectionMode::BottomPercent(0.0)).is_err());
    }

    #[test]
    fn csv_layout() {
        let corpus = Corpus::new(vec![Sample::new("a", "p", "FINDINGS: x.\nIMPRESSION: y.")]);
        let preds = BTreeMap::from([("a".to_string(), "FINDINGS: x.\nIMPRESSION: y.".to_string())]);
        let recs = score_predictions(&corpus, &preds, &ExploreConfig::new(LabelLexicon::carotid())).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "sample_id,bleu2,semantic,domain,s,rank,selected\na,1,1,1,0.5,1,true\n");
    }
}
