//! Policy interface and the bigram-softmax report policy.
//!
//! The next-token law of [`PolicyParams`] is
//!
//! ```text
//! pi(next | prev, class) = softmax(logits[prev] + prompt_bias[class])[next]
//! ```
//!
//! which keeps log-probabilities and their gradients in closed form. The
//! optimizer only talks to the [`Policy`] trait, so a different model can be
//! dropped in.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{normalize_text, Corpus, SectionHeaders};
use crate::metrics::tokenize;

pub type TokenId = usize;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const FINDINGS_TOKEN: &str = "FINDINGS:";
pub const IMPRESSION_TOKEN: &str = "IMPRESSION:";

/// Default cap on generated tokens per trajectory.
pub const DEFAULT_MAX_LEN: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range for vocabulary of {1}")]
    TokenOutOfRange(TokenId, usize),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("token sequence must start with BOS and contain at least one generated token")]
    BadSequence,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn sha256_hex(parts: impl IntoIterator<Item = impl AsRef<[u8]>>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_ref());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Token inventory. Ids are positions in `tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, PolicyError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(PolicyError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        for required in [BOS, EOS] {
            if !index.contains_key(required) {
                return Err(PolicyError::InvalidVocab(format!("missing {required}")));
            }
        }
        if tokens.len() < 4 {
            return Err(PolicyError::InvalidVocab(format!(
                "need at least 4 tokens, got {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, index })
    }

    /// Special tokens followed by every word of the corpus references,
    /// sorted.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut words = BTreeSet::new();
        for s in &corpus.samples {
            for line in normalize_text(&s.reference.full_text).split('\n') {
                let (_, rest) = split_header(line, &SectionHeaders::default());
                words.extend(tokenize(rest).tokens().iter().cloned());
            }
        }
        let specials = [BOS, EOS, FINDINGS_TOKEN, IMPRESSION_TOKEN];
        let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !specials.contains(&w.as_str())));
        Self::new(tokens).expect("corpus vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> TokenId {
        self.index[BOS]
    }

    pub fn eos(&self) -> TokenId {
        self.index[EOS]
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.tokens)
    }
}

/// Maps prompt strings to a small number of conditioning classes: listed
/// prompts get their own class, anything else is hash-bucketed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptClassMap {
    names: Vec<String>,
    explicit: BTreeMap<String, usize>,
}

impl PromptClassMap {
    /// `n` anonymous hash buckets.
    pub fn buckets(n: usize) -> Self {
        Self {
            names: (0..n.max(1)).map(|i| format!("bucket-{i}")).collect(),
            explicit: BTreeMap::new(),
        }
    }

    /// One class per distinct prompt if there are at most `max_classes` of
    /// them, else `max_classes` hash buckets.
    pub fn from_prompts<'a>(prompts: impl IntoIterator<Item = &'a str>, max_classes: usize) -> Self {
        let distinct: BTreeSet<&str> = prompts.into_iter().collect();
        if distinct.len() > max_classes || distinct.is_empty() {
            return Self::buckets(max_classes);
        }
        let names: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
        let explicit = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Self { names, explicit }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn class_of(&self, prompt: &str) -> usize {
        if let Some(&c) = self.explicit.get(prompt) {
            return c;
        }
        let digest = Sha256::digest(prompt.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(b) % self.names.len() as u64) as usize
    }

    pub fn hash(&self) -> String {
        let explicit = self.explicit.iter().map(|(k, v)| format!("{k}\u{1}{v}"));
        sha256_hex(self.names.iter().cloned().chain(explicit))
    }
}

/// Splits a leading section header off a line, returning the header token
/// (if any) and the remaining text.
fn split_header<'a>(line: &'a str, headers: &SectionHeaders) -> (Option<&'static str>, &'a str) {
    let trimmed = line.trim_start();
    let lower = trimmed.to_lowercase();
    let kinds = headers
        .findings
        .iter()
        .map(|h| (FINDINGS_TOKEN, h))
        .chain(headers.impression.iter().map(|h| (IMPRESSION_TOKEN, h)));
    for (token, name) in kinds {
        let name = name.to_lowercase();
        if lower.starts_with(&name) && trimmed.is_char_boundary(name.len()) {
            let after = &trimmed[name.len()..];
            if let Some(rest) = after.strip_prefix(':') {
                return (Some(token), rest);
            }
            if after.trim().is_empty() {
                return (Some(token), "");
            }
        }
    }
    (None, line)
}

/// Converts between report text and token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCodec {
    pub vocab: Vocab,
    pub classes: PromptClassMap,
    pub headers: SectionHeaders,
}

impl ReportCodec {
    pub fn new(vocab: Vocab, classes: PromptClassMap) -> Self {
        Self {
            vocab,
            classes,
            headers: SectionHeaders::default(),
        }
    }

    /// Vocabulary and one class per distinct prompt (up to `max_classes`).
    pub fn from_corpus(corpus: &Corpus, max_classes: usize) -> Self {
        Self::new(
            Vocab::from_corpus(corpus),
            PromptClassMap::from_prompts(corpus.samples.iter().map(|s| s.prompt.as_str()), max_classes),
        )
    }

    /// Token ids for `text`, framed by BOS and EOS.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, PolicyError> {
        let mut ids = vec![self.vocab.bos()];
        for line in normalize_text(text).split('\n') {
            let (header, rest) = split_header(line, &self.headers);
            if let Some(h) = header {
                ids.push(self.lookup(h)?);
            }
            for tok in tokenize(rest).tokens() {
                ids.push(self.lookup(tok)?);
            }
        }
        ids.push(self.vocab.eos());
        Ok(ids)
    }

    fn lookup(&self, tok: &str) -> Result<TokenId, PolicyError> {
        self.vocab
            .id(tok)
            .ok_or_else(|| PolicyError::UnknownToken(tok.to_string()))
    }

    /// Renders ids as report text. Headers start a new line; detached
    /// punctuation is re-attached to the preceding word.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let (bos, eos) = (self.vocab.bos(), self.vocab.eos());
        let mut out = String::new();
        for &id in ids {
            if id == bos || id == eos {
                continue;
            }
            let tok = self.vocab.token(id);
            if tok == FINDINGS_TOKEN || tok == IMPRESSION_TOKEN {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(tok);
            } else if tok.len() == 1 && tok.chars().all(|c| ".,;:!?".contains(c)) {
                out.push_str(tok);
            } else {
                if !out.is_empty() && !out.ends_with('\n') {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    pub fn class_of(&self, prompt: &str) -> usize {
        self.classes.class_of(prompt)
    }
}

/// Gradient buffers produced by a [`Policy`].
pub trait Gradient: Clone {
    fn norm(&self) -> f64;
    fn scale(&mut self, factor: f64);
    /// `self += factor * other`.
    fn add_scaled(&mut self, other: &Self, factor: f64);
}

/// An autoregressive token policy conditioned on a prompt class.
///
/// Sequences are BOS-initiated; `prefix` always contains at least BOS.
pub trait Policy {
    type Grad: Gradient;

    fn vocab_size(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Log-probabilities of every next token.
    fn next_log_probs(&self, class: usize, prefix: &[TokenId]) -> Vec<f64>;

    /// Adds `scale * d log pi(target | prefix) / d theta` to `grad`.
    fn accumulate_grad_log_prob(
        &self,
        class: usize,
        prefix: &[TokenId],
        target: TokenId,
        scale: f64,
        grad: &mut Self::Grad,
    );

    fn zero_grad(&self) -> Self::Grad;

    /// `theta += step * grad`.
    fn apply_gradient(&mut self, grad: &Self::Grad, step: f64);
}

/// Parameter table of the bigram policy. Also used as its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    num_classes: usize,
    /// Row-major `V x V`; row = previous token.
    pub logits: Vec<f64>,
    /// Row-major `C x V`.
    pub prompt_bias: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            num_classes,
            logits: vec![0.0; vocab_size * vocab_size],
            prompt_bias: vec![0.0; num_classes * vocab_size],
        }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, num_classes: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab_size, num_classes);
        for x in p.logits.iter_mut().chain(p.prompt_bias.iter_mut()) {
            *x = rng.random_range(-scale..=scale);
        }
        p
    }

    pub fn from_parts(
        vocab_size: usize,
        num_classes: usize,
        logits: Vec<f64>,
        prompt_bias: Vec<f64>,
    ) -> Option<Self> {
        (logits.len() == vocab_size * vocab_size && prompt_bias.len() == num_classes * vocab_size)
            .then_some(Self {
                vocab_size,
                num_classes,
                logits,
                prompt_bias,
            })
    }

    pub fn logit(&self, prev: TokenId, next: TokenId) -> f64 {
        self.logits[prev * self.vocab_size + next]
    }

    pub fn logit_mut(&mut self, prev: TokenId, next: TokenId) -> &mut f64 {
        &mut self.logits[prev * self.vocab_size + next]
    }

    pub fn bias_mut(&mut self, class: usize, next: TokenId) -> &mut f64 {
        &mut self.prompt_bias[class * self.vocab_size + next]
    }

    /// All parameters as one flat vector (logits then biases).
    pub fn flat(&self) -> Vec<f64> {
        self.logits.iter().chain(&self.prompt_bias).copied().collect()
    }

    pub fn flat_get(&self, i: usize) -> f64 {
        if i < self.logits.len() {
            self.logits[i]
        } else {
            self.prompt_bias[i - self.logits.len()]
        }
    }

    pub fn flat_set(&mut self, i: usize, value: f64) {
        let n = self.logits.len();
        if i < n {
            self.logits[i] = value;
        } else {
            self.prompt_bias[i - n] = value;
        }
    }

    pub fn num_params(&self) -> usize {
        self.logits.len() + self.prompt_bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().chain(&self.prompt_bias).all(|x| x.is_finite())
    }

    fn log_softmax_row(&self, class: usize, prev: TokenId) -> Vec<f64> {
        let v = self.vocab_size;
        let row = &self.logits[prev * v..(prev + 1) * v];
        let bias = &self.prompt_bias[class * v..(class + 1) * v];
        let z: Vec<f64> = row.iter().zip(bias).map(|(a, b)| a + b).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        z.into_iter().map(|x| x - lse).collect()
    }

    /// Next-token distribution after `prev`.
    pub fn next_probs(&self, class: usize, prev: TokenId) -> Vec<f64> {
        self.log_softmax_row(class, prev).into_iter().map(f64::exp).collect()
    }
}

impl Gradient for PolicyParams {
    fn norm(&self) -> f64 {
        self.logits
            .iter()
            .chain(&self.prompt_bias)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for x in self.logits.iter_mut().chain(self.prompt_bias.iter_mut()) {
            *x *= factor;
        }
    }

    fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (x, g) in self.logits.iter_mut().zip(&other.logits) {
            *x += factor * g;
        }
        for (x, g) in self.prompt_bias.iter_mut().zip(&other.prompt_bias) {
            *x += factor * g;
        }
    }
}

/// Gradient of one token's log-probability. The same `delta` applies to
/// `logits[prev][..]` and to `prompt_bias[class][..]`; every other entry is
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrad {
    pub prev: TokenId,
    pub class: usize,
    pub delta: Vec<f64>,
}

/// Closed-form `d log pi(tokens[t] | tokens[t-1]) / d theta`, for
/// `1 <= t < tokens.len()`.
pub fn grad_log_prob(params: &PolicyParams, class: usize, tokens: &[TokenId], t: usize) -> TokenGrad {
    let prev = tokens[t - 1];
    let mut delta: Vec<f64> = params.next_probs(class, prev).into_iter().map(|p| -p).collect();
    delta[tokens[t]] += 1.0;
    TokenGrad { prev, class, delta }
}

impl Policy for PolicyParams {
    type Grad = PolicyParams;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn next_log_probs(&self, class: usize, prefix: &[TokenId]) -> Vec<f64> {
        self.log_softmax_row(class, *prefix.last().expect("prefix holds BOS"))
    }

    fn accumulate_grad_log_prob(
        &self,
        class: usize,
        prefix: &[TokenId],
        target: TokenId,
        scale: f64,
        grad: &mut PolicyParams,
    ) {
        let v = self.vocab_size;
        let prev = *prefix.last().expect("prefix holds BOS");
        let probs = self.next_probs(class, prev);
        let row = &mut grad.logits[prev * v..(prev + 1) * v];
        for (j, p) in probs.iter().enumerate() {
            let d = scale * ((j == target) as u8 as f64 - p);
            row[j] += d;
        }
        let bias = &mut grad.prompt_bias[class * v..(class + 1) * v];
        for (j, p) in probs.iter().enumerate() {
            bias[j] += scale * ((j == target) as u8 as f64 - p);
        }
    }

    fn zero_grad(&self) -> PolicyParams {
        PolicyParams::zeros(self.vocab_size, self.num_classes)
    }

    fn apply_gradient(&mut self, grad: &PolicyParams, step: f64) {
        self.add_scaled(grad, step);
    }
}

/// Immutable shared copy of a policy, used for the sampling policy and the
/// KL reference.
#[derive(Debug, Clone)]
pub struct Snapshot<P>(Arc<P>);

impl<P> Deref for Snapshot<P> {
    type Target = P;
    fn deref(&self) -> &P {
        &self.0
    }
}

pub fn snapshot<P: Clone>(policy: &P) -> Snapshot<P> {
    Snapshot(Arc::new(policy.clone()))
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// BOS first; EOS last unless truncated.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each generated token under the sampling policy.
    pub logprobs_old: Vec<f64>,
    pub prompt_class: usize,
    pub truncated: bool,
}

impl Trajectory {
    /// Number of generated tokens.
    pub fn len(&self) -> usize {
        self.logprobs_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs_old.is_empty()
    }
}

/// G responses to one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub sample_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
}

fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative mass: take the last token with
    // nonzero probability
    log_probs
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(log_probs.len() - 1)
}

/// Ancestral sample of at most `max_len` tokens. Stops at EOS.
pub fn sample_trajectory<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    class: usize,
    bos: TokenId,
    eos: TokenId,
    max_len: usize,
    rng: &mut R,
) -> Trajectory {
    let mut tokens = vec![bos];
    let mut logprobs = Vec::new();
    let mut truncated = true;
    for _ in 0..max_len {
        let lps = policy.next_log_probs(class, &tokens);
        let next = sample_index(&lps, rng);
        tokens.push(next);
        logprobs.push(lps[next]);
        if next == eos {
            truncated = false;
            break;
        }
    }
    Trajectory {
        tokens,
        logprobs_old: logprobs,
        prompt_class: class,
        truncated,
    }
}

/// `g` independent trajectories from the sampling policy.
pub fn sample_group<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    sample_id: &str,
    class: usize,
    vocab: &Vocab,
    g: usize,
    max_len: usize,
    rng: &mut R,
) -> Group {
    assert!(g >= 2, "group size must be at least 2");
    assert!(max_len >= 1, "max_len must be at least 1");
    let trajectories = (0..g)
        .map(|_| sample_trajectory(policy, class, vocab.bos(), vocab.eos(), max_len, rng))
        .collect();
    Group {
        sample_id: sample_id.to_string(),
        trajectories,
        rewards: Vec::new(),
    }
}

/// Argmax decode (lowest id wins ties).
pub fn greedy_decode<P: Policy + ?Sized>(
    policy: &P,
    class: usize,
    bos: TokenId,
    eos: TokenId,
    max_len: usize,
) -> Vec<TokenId> {
    let mut tokens = vec![bos];
    for _ in 0..max_len {
        let lps = policy.next_log_probs(class, &tokens);
        let mut best = 0;
        for (i, &lp) in lps.iter().enumerate() {
            if lp > lps[best] {
                best = i;
            }
        }
        tokens.push(best);
        if best == eos {
            break;
        }
    }
    tokens
}

/// Log-probability of each generated token (`tokens[1..]`).
pub fn token_log_probs<P: Policy + ?Sized>(
    policy: &P,
    class: usize,
    tokens: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    if tokens.len() < 2 {
        return Err(PolicyError::BadSequence);
    }
    let v = policy.vocab_size();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
        return Err(PolicyError::TokenOutOfRange(bad, v));
    }
    Ok((1..tokens.len())
        .map(|t| policy.next_log_probs(class, &tokens[..t])[tokens[t]])
        .collect())
}

/// An encoded training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub class: usize,
    pub tokens: Vec<TokenId>,
}

/// Encodes every reference of `corpus`.
pub fn encode_corpus(codec: &ReportCodec, corpus: &Corpus) -> Result<Vec<EncodedSequence>, PolicyError> {
    corpus
        .samples
        .iter()
        .map(|s| {
            Ok(EncodedSequence {
                class: codec.class_of(&s.prompt),
                tokens: codec.encode(&s.reference.full_text)?,
            })
        })
        .collect()
}

/// Mean per-token negative log-likelihood.
pub fn mean_nll<P: Policy + ?Sized>(policy: &P, data: &[EncodedSequence]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in data {
        let lps = token_log_probs(policy, seq.class, &seq.tokens).expect("encoded sequences are valid");
        total -= lps.iter().sum::<f64>();
        count += lps.len();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn perplexity<P: Policy + ?Sized>(policy: &P, data: &[EncodedSequence]) -> f64 {
    mean_nll(policy, data).exp()
}

/// Maximum-likelihood fit on reference sequences: per-sample gradient
/// ascent on the length-normalized log-likelihood, samples shuffled each
/// epoch.
pub fn supervised_fit<P: Policy + Clone, R: Rng + ?Sized>(
    policy: &P,
    data: &[EncodedSequence],
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> P {
    let mut params = policy.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for &i in &order {
            let seq = &data[i];
            let n = (seq.tokens.len() - 1) as f64;
            let mut grad = params.zero_grad();
            for t in 1..seq.tokens.len() {
                params.accumulate_grad_log_prob(seq.class, &seq.tokens[..t], seq.tokens[t], 1.0 / n, &mut grad);
            }
            params.apply_gradient(&grad, lr);
        }
    }
    params
}

/// Serializable ChaCha8 position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).ok()?;
        let seed: [u8; 32] = bytes.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "RFTCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    format_version: u32,
    vocab_size: usize,
    num_classes: usize,
    vocab_hash: String,
    class_map_hash: String,
    step: u64,
    rng: Option<RngState>,
    vocab: Vec<String>,
    classes: PromptClassMap,
    payload_len: usize,
}

/// Policy parameters with everything needed to resume from them.
///
/// On disk: one JSON header line, then `payload_len` little-endian `f64`s
/// (logits row-major, then prompt biases row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub codec: ReportCodec,
    pub step: u64,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let path = path.as_ref();
        let io_err = |source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        };
        let header = CheckpointHeader {
            magic: CHECKPOINT_MAGIC.into(),
            format_version: CHECKPOINT_FORMAT_VERSION,
            vocab_size: self.params.vocab_size,
            num_classes: self.params.num_classes,
            vocab_hash: self.codec.vocab.hash(),
            class_map_hash: self.codec.classes.hash(),
            step: self.step,
            rng: self.rng.clone(),
            vocab: self.codec.vocab.tokens().to_vec(),
            classes: self.codec.classes.clone(),
            payload_len: self.params.num_params(),
        };
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
            let line = serde_json::to_string(&header).expect("header serializes");
            w.write_all(line.as_bytes()).map_err(io_err)?;
            w.write_all(b"\n").map_err(io_err)?;
            for x in self.params.logits.iter().chain(&self.params.prompt_bias) {
                w.write_all(&x.to_le_bytes()).map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let io_err = |source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bad = |message: String| PolicyError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(io_err)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("header: {e}")))?;
        if header.magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let vocab = Vocab::new(header.vocab).map_err(|e| bad(e.to_string()))?;
        if vocab.hash() != header.vocab_hash || vocab.len() != header.vocab_size {
            return Err(bad("vocabulary does not match its hash".into()));
        }
        if header.classes.hash() != header.class_map_hash || header.classes.len() != header.num_classes {
            return Err(bad("class map does not match its hash".into()));
        }
        let expected = header.vocab_size * header.vocab_size + header.num_classes * header.vocab_size;
        if header.payload_len != expected {
            return Err(bad(format!("payload length {} != {expected}", header.payload_len)));
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(io_err)?;
        if bytes.len() != expected * 8 {
            return Err(bad(format!("payload has {} bytes, expected {}", bytes.len(), expected * 8)));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let split = header.vocab_size * header.vocab_size;
        let params = PolicyParams::from_parts(
            header.vocab_size,
            header.num_classes,
            values[..split].to_vec(),
            values[split..].to_vec(),
        )
        .expect("sizes checked above");
        Ok(Self {
            params,
            codec: ReportCodec::new(vocab, header.classes),
            step: header.step,
            rng: header.rng,
        })
    }
}
