//! Report data model, section parsing and JSONL corpus ingestion.
//!
//! Reports are split into a Findings section and an Impression section by a
//! deterministic line-oriented parser. Section text is always derived from
//! `full_text`; nothing in a corpus file is trusted beyond the raw report.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Errors raised while reading or writing a corpus file.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: invalid sample: {violations}")]
    Invalid { line: usize, violations: Violations },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
}

/// Outcome of section detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    BothFound,
    FindingsOnly,
    ImpressionOnly,
    NoHeaders,
    Ambiguous,
}

impl ParseStatus {
    /// Whether the Impression-level reward must be skipped for this parse.
    pub fn is_fallback(self) -> bool {
        matches!(self, ParseStatus::NoHeaders | ParseStatus::Ambiguous)
    }
}

/// Clinical criticality of a reference report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criticality {
    Critical,
    Normal,
    #[default]
    Unannotated,
}

impl Criticality {
    pub fn as_str(self) -> &'static str {
        match self {
            Criticality::Critical => "critical",
            Criticality::Normal => "normal",
            Criticality::Unannotated => "unannotated",
        }
    }
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Header vocabulary for the two sections. Matching is case-insensitive and
/// accepts either `NAME:` followed by text or a line holding only `NAME`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionHeaders {
    pub findings: Vec<String>,
    pub impression: Vec<String>,
}

impl Default for SectionHeaders {
    fn default() -> Self {
        Self {
            findings: vec!["findings".to_string()],
            impression: vec!["impression".to_string()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SectionKind {
    Findings,
    Impression,
}

/// A report with its parsed sections.
///
/// `findings` and `impression` are trimmed slices of `full_text`; the byte
/// spans they came from are kept so callers can check disjointness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionedReport {
    pub full_text: String,
    pub findings: Option<String>,
    pub impression: Option<String>,
    pub parse_status: ParseStatus,
    findings_span: Option<Range<usize>>,
    impression_span: Option<Range<usize>>,
}

impl SectionedReport {
    pub fn findings_span(&self) -> Option<Range<usize>> {
        self.findings_span.clone()
    }

    pub fn impression_span(&self) -> Option<Range<usize>> {
        self.impression_span.clone()
    }

    /// Findings text if parsed, otherwise the full report.
    pub fn findings_or_full(&self) -> &str {
        self.findings.as_deref().unwrap_or(&self.full_text)
    }
}

/// NFC-normalizes and converts CRLF / lone CR line endings to LF.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.replace("\r\n", "\n").replace('\r', "\n")
}

/// Parses a report with the default `FINDINGS` / `IMPRESSION` headers.
pub fn parse_sections(text: &str) -> SectionedReport {
    parse_sections_with(text, &SectionHeaders::default())
}

/// Line-start header match. Returns the byte offset (within `line`) where
/// the section content begins.
fn match_header(line: &str, headers: &SectionHeaders) -> Option<(SectionKind, usize)> {
    let indent = line.len() - line.trim_start_matches([' ', '\t']).len();
    let rest = &line[indent..];
    let candidates = headers
        .findings
        .iter()
        .map(|h| (SectionKind::Findings, h))
        .chain(headers.impression.iter().map(|h| (SectionKind::Impression, h)));
    for (kind, name) in candidates {
        let n = name.len();
        if rest.len() < n || !rest.is_char_boundary(n) {
            continue;
        }
        if !rest[..n].eq_ignore_ascii_case(name) {
            continue;
        }
        let after = &rest[n..];
        if after.starts_with(':') {
            return Some((kind, indent + n + 1));
        }
        if after.trim().is_empty() {
            return Some((kind, line.len()));
        }
    }
    None
}

fn trimmed_span(text: &str, range: Range<usize>) -> Option<Range<usize>> {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if trimmed.is_empty() {
        None
    } else {
        let start = range.start + lead;
        Some(start..start + trimmed.len())
    }
}

/// Parses `text` into sections using a configurable header vocabulary.
///
/// Each section runs from the end of its header to the start of the next
/// header line (or end of text) and is trimmed. A header kind seen twice
/// yields `Ambiguous`; a section whose body is blank counts as absent.
pub fn parse_sections_with(text: &str, headers: &SectionHeaders) -> SectionedReport {
    let full_text = normalize_text(text);

    // (kind, header line start, content start)
    let mut found: Vec<(SectionKind, usize, usize)> = Vec::new();
    let mut offset = 0;
    for line in full_text.split('\n') {
        if let Some((kind, content)) = match_header(line, headers) {
            found.push((kind, offset, offset + content));
        }
        offset += line.len() + 1;
    }

    let count = |k: SectionKind| found.iter().filter(|(kind, _, _)| *kind == k).count();
    let (n_find, n_imp) = (count(SectionKind::Findings), count(SectionKind::Impression));

    let absent = |status| SectionedReport {
        full_text: full_text.clone(),
        findings: None,
        impression: None,
        parse_status: status,
        findings_span: None,
        impression_span: None,
    };
    if found.is_empty() {
        return absent(ParseStatus::NoHeaders);
    }
    if n_find > 1 || n_imp > 1 {
        return absent(ParseStatus::Ambiguous);
    }

    let mut findings_span = None;
    let mut impression_span = None;
    for (i, &(kind, _, content_start)) in found.iter().enumerate() {
        let end = found.get(i + 1).map_or(full_text.len(), |next| next.1);
        let end = end.max(content_start);
        let span = trimmed_span(&full_text, content_start..end);
        match kind {
            SectionKind::Findings => findings_span = span,
            SectionKind::Impression => impression_span = span,
        }
    }

    let parse_status = match (&findings_span, &impression_span) {
        (Some(_), Some(_)) => ParseStatus::BothFound,
        (Some(_), None) => ParseStatus::FindingsOnly,
        (None, Some(_)) => ParseStatus::ImpressionOnly,
        (None, None) => ParseStatus::NoHeaders,
    };
    let slice = |s: &Option<Range<usize>>| s.as_ref().map(|r| full_text[r.clone()].to_string());
    SectionedReport {
        findings: slice(&findings_span),
        impression: slice(&impression_span),
        parse_status,
        findings_span,
        impression_span,
        full_text,
    }
}

/// One training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Stands in for the input image.
    pub prompt: String,
    pub context: Option<String>,
    pub reference: SectionedReport,
    pub criticality: Criticality,
}

impl Sample {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, reference_text: &str) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            context: None,
            reference: parse_sections(reference_text),
            criticality: Criticality::Unannotated,
        }
    }
}

/// A single broken invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violations(pub Vec<Violation>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks the per-sample invariants. Uniqueness of ids is a corpus-level
/// property and is checked by [`load_corpus`].
pub fn validate_sample(sample: &Sample) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.id.is_empty() {
        out.push(Violation {
            field: "id",
            rule: "id nonempty",
        });
    }
    if sample.reference.full_text.trim().is_empty() {
        out.push(Violation {
            field: "reference.full_text",
            rule: "reference nonempty",
        });
    }
    out
}

/// Ordered collection of samples, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub source_path: String,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            source_path: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn is_fully_annotated(&self) -> bool {
        self.samples
            .iter()
            .all(|s| s.criticality != Criticality::Unannotated)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceRecord {
    full_text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    prompt: String,
    #[serde(default)]
    context: Option<String>,
    reference: ReferenceRecord,
    #[serde(default)]
    criticality: Option<Criticality>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        SampleRecord {
            id: s.id.clone(),
            prompt: s.prompt.clone(),
            context: s.context.clone(),
            reference: ReferenceRecord {
                full_text: s.reference.full_text.clone(),
            },
            criticality: match s.criticality {
                Criticality::Unannotated => None,
                c => Some(c),
            },
        }
    }
}

/// Parses one JSONL record. `line` is 1-based and used only for errors.
pub fn parse_record(json: &str, line: usize) -> Result<Sample, CorpusError> {
    let rec: SampleRecord = serde_json::from_str(json).map_err(|e| CorpusError::Schema {
        line,
        message: e.to_string(),
    })?;
    if rec.criticality == Some(Criticality::Unannotated) {
        return Err(CorpusError::Schema {
            line,
            message: "criticality must be \"critical\", \"normal\" or null".into(),
        });
    }
    let sample = Sample {
        id: rec.id,
        prompt: rec.prompt,
        context: rec.context,
        reference: parse_sections(&rec.reference.full_text),
        criticality: rec.criticality.unwrap_or_default(),
    };
    let violations = validate_sample(&sample);
    if !violations.is_empty() {
        return Err(CorpusError::Invalid {
            line,
            violations: Violations(violations),
        });
    }
    Ok(sample)
}

/// Reads a JSONL corpus. Blank lines are skipped but still counted.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(&line, line_no)?;
        if !seen.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        samples.push(sample);
    }
    Ok(Corpus {
        samples,
        source_path: path.display().to_string(),
    })
}

/// Serializes a corpus to JSONL, one record per line.
pub fn corpus_to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.samples {
        let rec = SampleRecord::from(s);
        // SampleRecord holds only strings and enums; serialization cannot fail.
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes a corpus via a temporary file and rename so readers never see a
/// partially written file.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
        w.write_all(corpus_to_jsonl(corpus).as_bytes())
            .map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}
