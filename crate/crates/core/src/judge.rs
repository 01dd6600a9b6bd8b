//! LLM-as-a-judge client for Findings/Impression consistency and for
//! criticality triage, with a rule-based mock and a content-hash cache.
//!
//! Replies are binarized by their first word: `yes`/`consistent` is
//! positive, `no`/`inconsistent` negative, and anything else is a parse
//! error rather than a guess.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Criticality, SectionedReport};
use crate::metrics::{binarize, extract_labels, LabelLexicon, MetricError, DEFAULT_THRESHOLD};

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("judge unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: usize, last_error: String },
    #[error("unparseable judge reply {raw:?}")]
    Parse { raw: String },
    #[error("invalid judge input: {0}")]
    InvalidInput(&'static str),
    #[error("judge cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lexicon(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictSource {
    Remote,
    Mock,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub consistent: bool,
    pub raw: String,
    pub source: VerdictSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalityVerdict {
    pub criticality: Criticality,
    pub raw: String,
    pub source: VerdictSource,
}

/// First-word binarization of a judge reply.
pub fn binarize_answer(raw: &str) -> Option<bool> {
    let first = raw.split_whitespace().next()?;
    let word = first
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    match word.as_str() {
        "yes" | "consistent" => Some(true),
        "no" | "inconsistent" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeTask {
    Consistency,
    Criticality,
}

/// Prompt templates. `{findings}`, `{impression}` and `{report}` are
/// substituted verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub consistency: String,
    pub criticality: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            consistency: "You are reviewing a radiology report.\n\
                          Findings: {findings}\n\
                          Impression: {impression}\n\
                          Does the diagnostic conclusion stated in the Impression logically follow \
                          from the observations described in the Findings? \
                          Answer with a single word: yes or no."
                .to_string(),
            criticality: "Does this report describe any abnormal, pathological, or clinically \
                          significant finding? Answer with a single word: yes or no.\n\
                          Report:\n{report}"
                .to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn render_consistency(&self, findings: &str, impression: &str) -> String {
        self.consistency
            .replace("{findings}", findings)
            .replace("{impression}", impression)
    }

    pub fn render_criticality(&self, report: &str) -> String {
        self.criticality.replace("{report}", report)
    }
}

/// Wire request body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub task: JudgeTask,
    pub findings: Option<String>,
    pub impression: Option<String>,
    pub full_text: Option<String>,
    pub prompt: String,
}

impl JudgeRequest {
    fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        // prompt already embeds every input field
        h.update(serde_json::to_vec(&self.task).expect("task serializes"));
        h.update([0u8]);
        h.update(self.prompt.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Wire response body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub answer: String,
}

/// Delivers one request to a judge. Implementations report transport
/// failures as strings; retry policy lives in [`Judge`].
pub trait JudgeTransport: Send + Sync {
    fn send(&self, request: &JudgeRequest) -> Result<JudgeResponse, String>;
}

/// Endpoint settings for the remote judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSettings {
    pub url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> usize {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

pub const ENV_JUDGE_URL: &str = "RFT_JUDGE_URL";
pub const ENV_JUDGE_API_KEY: &str = "RFT_JUDGE_API_KEY";

impl RemoteSettings {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    /// Environment variables take precedence over file values.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_JUDGE_URL) {
            self.url = url;
        }
        if let Ok(key) = std::env::var(ENV_JUDGE_API_KEY) {
            self.api_key = Some(key);
        }
        self
    }
}

/// JSON-over-HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(settings: &RemoteSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(settings.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            url: settings.url.clone(),
            api_key: settings.api_key.clone(),
        }
    }
}

impl JudgeTransport for HttpTransport {
    fn send(&self, request: &JudgeRequest) -> Result<JudgeResponse, String> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| e.to_string())?;
        resp.body_mut()
            .read_json::<JudgeResponse>()
            .map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    answer: String,
}

/// Content-addressed store of raw judge answers, optionally persisted as
/// append-only JSONL.
#[derive(Debug, Default)]
pub struct VerdictCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, String>>,
}

impl VerdictCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates on first insert) a persisted cache.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JudgeError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let cache_err = |source| JudgeError::Cache {
                path: path.clone(),
                source,
            };
            let reader = BufReader::new(File::open(&path).map_err(cache_err)?);
            for line in reader.lines() {
                let line = line.map_err(cache_err)?;
                // a torn final line from an interrupted run is dropped
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.answer);
                }
            }
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    fn insert(&self, key: String, answer: String) -> Result<(), JudgeError> {
        let mut entries = self.entries.lock().expect("cache lock");
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let cache_err = |source| JudgeError::Cache {
                path: path.clone(),
                source,
            };
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(cache_err)?;
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                answer: answer.clone(),
            })
            .expect("cache line serializes");
            writeln!(f, "{line}").map_err(cache_err)?;
        }
        entries.insert(key, answer);
        Ok(())
    }
}

/// Consistent iff the impression's label set is a subset of the findings'.
pub fn mock_judge_consistency(
    findings: &str,
    impression: &str,
    lexicon: &LabelLexicon,
) -> Result<JudgeVerdict, JudgeError> {
    let f = binarize(&extract_labels(findings, lexicon)?, DEFAULT_THRESHOLD);
    let i = binarize(&extract_labels(impression, lexicon)?, DEFAULT_THRESHOLD);
    let consistent = i.iter().zip(&f).all(|(&imp, &find)| !imp || find);
    Ok(JudgeVerdict {
        consistent,
        raw: if consistent { "yes" } else { "no" }.to_string(),
        source: VerdictSource::Mock,
    })
}

/// Critical iff any abnormality label fires on the full report.
pub fn mock_criticality(
    report: &SectionedReport,
    lexicon: &LabelLexicon,
) -> Result<CriticalityVerdict, JudgeError> {
    let labels = binarize(&extract_labels(&report.full_text, lexicon)?, DEFAULT_THRESHOLD);
    let critical = labels.iter().any(|&b| b);
    Ok(CriticalityVerdict {
        criticality: if critical {
            Criticality::Critical
        } else {
            Criticality::Normal
        },
        raw: if critical { "yes" } else { "no" }.to_string(),
        source: VerdictSource::Mock,
    })
}

enum Backend {
    Mock(LabelLexicon),
    Remote {
        transport: Box<dyn JudgeTransport>,
        retries: usize,
        backoff: Duration,
    },
}

/// Judge handle shared by reward computation and annotation.
pub struct Judge {
    backend: Backend,
    templates: PromptTemplates,
    cache: VerdictCache,
    remote_requests: AtomicUsize,
}

impl std::fmt::Debug for Judge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Judge")
            .field("mock", &self.is_mock())
            .field("cached", &self.cache.len())
            .finish()
    }
}

impl Judge {
    pub fn mock(lexicon: LabelLexicon) -> Self {
        Self {
            backend: Backend::Mock(lexicon),
            templates: PromptTemplates::default(),
            cache: VerdictCache::in_memory(),
            remote_requests: AtomicUsize::new(0),
        }
    }

    pub fn remote(
        transport: Box<dyn JudgeTransport>,
        retries: usize,
        backoff: Duration,
        cache: VerdictCache,
    ) -> Self {
        Self {
            backend: Backend::Remote {
                transport,
                retries,
                backoff,
            },
            templates: PromptTemplates::default(),
            cache,
            remote_requests: AtomicUsize::new(0),
        }
    }

    /// HTTP judge configured from `settings`.
    pub fn http(settings: &RemoteSettings, cache: VerdictCache) -> Self {
        Self::remote(
            Box::new(HttpTransport::new(settings)),
            settings.retries,
            Duration::from_millis(settings.backoff_ms),
            cache,
        )
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.backend, Backend::Mock(_))
    }

    /// Number of requests actually sent over the transport (retries count).
    pub fn remote_requests(&self) -> usize {
        self.remote_requests.load(Ordering::SeqCst)
    }

    /// Asks the remote judge, consulting the cache first. Returns the raw
    /// answer, its binarization and where it came from.
    fn ask(&self, request: JudgeRequest) -> Result<(String, bool, VerdictSource), JudgeError> {
        let Backend::Remote {
            transport,
            retries,
            backoff,
        } = &self.backend
        else {
            unreachable!("ask is only used by the remote backend");
        };
        let key = request.cache_key();
        if let Some(raw) = self.cache.get(&key) {
            let value = binarize_answer(&raw).ok_or(JudgeError::Parse { raw: raw.clone() })?;
            return Ok((raw, value, VerdictSource::Cache));
        }
        let attempts = retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(*backoff * 2u32.saturating_pow(attempt as u32 - 1));
            }
            self.remote_requests.fetch_add(1, Ordering::SeqCst);
            match transport.send(&request) {
                Ok(resp) => {
                    let raw = resp.answer;
                    let value =
                        binarize_answer(&raw).ok_or_else(|| JudgeError::Parse { raw: raw.clone() })?;
                    self.cache.insert(key, raw.clone())?;
                    return Ok((raw, value, VerdictSource::Remote));
                }
                Err(e) => last_error = e,
            }
        }
        Err(JudgeError::Unavailable {
            attempts,
            last_error,
        })
    }

    /// Whether the impression logically follows from the findings.
    pub fn judge_consistency(
        &self,
        findings: &str,
        impression: &str,
    ) -> Result<JudgeVerdict, JudgeError> {
        if findings.trim().is_empty() || impression.trim().is_empty() {
            return Err(JudgeError::InvalidInput("findings and impression must be nonempty"));
        }
        match &self.backend {
            Backend::Mock(lexicon) => mock_judge_consistency(findings, impression, lexicon),
            Backend::Remote { .. } => {
                let request = JudgeRequest {
                    task: JudgeTask::Consistency,
                    findings: Some(findings.to_string()),
                    impression: Some(impression.to_string()),
                    full_text: None,
                    prompt: self.templates.render_consistency(findings, impression),
                };
                let (raw, consistent, source) = self.ask(request)?;
                Ok(JudgeVerdict {
                    consistent,
                    raw,
                    source,
                })
            }
        }
    }

    /// Critical / normal triage of a reference report.
    pub fn annotate_criticality(
        &self,
        reference: &SectionedReport,
    ) -> Result<CriticalityVerdict, JudgeError> {
        if reference.full_text.trim().is_empty() {
            return Err(JudgeError::InvalidInput("report must be nonempty"));
        }
        match &self.backend {
            Backend::Mock(lexicon) => mock_criticality(reference, lexicon),
            Backend::Remote { .. } => {
                let request = JudgeRequest {
                    task: JudgeTask::Criticality,
                    findings: reference.findings.clone(),
                    impression: reference.impression.clone(),
                    full_text: Some(reference.full_text.clone()),
                    prompt: self.templates.render_criticality(&reference.full_text),
                };
                let (raw, critical, source) = self.ask(request)?;
                Ok(CriticalityVerdict {
                    criticality: if critical {
                        Criticality::Critical
                    } else {
                        Criticality::Normal
                    },
                    raw,
                    source,
                })
            }
        }
    }
}

/// Fills in criticality for every unannotated sample. Samples that already
/// carry a label are left alone, so a second pass issues no requests.
/// Returns how many samples were newly annotated. On error, samples
/// annotated so far keep their labels.
pub fn annotate_corpus(corpus: &mut Corpus, judge: &Judge) -> Result<usize, JudgeError> {
    let mut annotated = 0;
    for sample in corpus
        .samples
        .iter_mut()
        .filter(|s| s.criticality == Criticality::Unannotated)
    {
        sample.criticality = judge.annotate_criticality(&sample.reference)?.criticality;
        annotated += 1;
    }
    Ok(annotated)
}
