//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use rft_core::explore::ScoreWeights;
use rft_core::judge::{PromptTemplates, RemoteSettings, ENV_JUDGE_URL};
use rft_core::metrics::DEFAULT_THRESHOLD;
use rft_core::reward::GlobalWeights;
use rft_core::{CapoConfig, LabelLexicon, RewardConfig, SelectionMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Half-width of the uniform initialization of every parameter.
    pub init_scale: f64,
    pub max_classes: usize,
}

impl Default for SftSettings {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1.0,
            init_scale: 3.0,
            max_classes: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSettings {
    pub gamma: f64,
    pub weights: GlobalWeights,
    pub threshold: f64,
}

impl Default for RewardSettings {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            weights: GlobalWeights::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Set at most one of `k` (bottom percent) and `tau` (score threshold).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExploreSettings {
    pub k: Option<f64>,
    pub tau: Option<f64>,
    pub weights: ScoreWeights,
}

impl ExploreSettings {
    pub fn mode(&self) -> Result<SelectionMode, CliError> {
        match (self.k, self.tau) {
            (Some(_), Some(_)) => Err(CliError::Config("explore: set either k or tau, not both".into())),
            (None, Some(t)) => Ok(SelectionMode::Threshold(t)),
            (Some(k), None) => Ok(SelectionMode::BottomPercent(k)),
            (None, None) => Ok(SelectionMode::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    #[default]
    Remote,
    Mock,
}

/// Judge endpoint settings. The API key is read from the environment only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSettings {
    pub mode: JudgeMode,
    pub url: Option<String>,
    pub timeout_secs: f64,
    pub retries: usize,
    pub backoff_ms: u64,
    /// Verdict cache; defaults to `judge_cache.jsonl` in the output directory.
    pub cache: Option<PathBuf>,
    /// TOML file with `consistency` and `criticality` templates.
    pub templates: Option<PathBuf>,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        let base = RemoteSettings::new("");
        Self {
            mode: JudgeMode::Remote,
            url: None,
            timeout_secs: base.timeout_secs,
            retries: base.retries,
            backoff_ms: base.backoff_ms,
            cache: None,
            templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySettings {
    pub trials: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub eps: f64,
    pub r_max: f64,
    /// Clipping ranges of the sweep written to `tightness.csv`.
    pub grid: Vec<f64>,
    pub sweep_trials: usize,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            trials: 10_000,
            max_states: 5,
            max_actions: 5,
            gamma: 0.95,
            eps: 0.2,
            r_max: 1.0,
            grid: vec![0.01, 0.1, 0.3],
            sweep_trials: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Trailing samples of the corpus kept out of sft, explore and train.
    pub held_out: usize,
    /// One token per line; must contain the special tokens.
    pub vocab: Option<PathBuf>,
    /// JSON label lexicon; the built-in carotid lexicon otherwise.
    pub lexicon: Option<PathBuf>,
    pub sft: SftSettings,
    /// `capo.seed` is replaced by the top-level seed.
    pub capo: CapoConfig,
    pub reward: RewardSettings,
    pub explore: ExploreSettings,
    pub judge: JudgeSettings,
    pub theory: TheorySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            corpus: None,
            held_out: 0,
            vocab: None,
            lexicon: None,
            sft: SftSettings::default(),
            capo: CapoConfig::default(),
            reward: RewardSettings::default(),
            explore: ExploreSettings::default(),
            judge: JudgeSettings::default(),
            theory: TheorySettings::default(),
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mock_judge: bool,
    pub grpo: bool,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Reads `path` (or defaults when `None`), resolves relative paths
    /// against the file's directory, applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                let mut cfg = Self::from_toml(&text)?;
                let base = p.parent().unwrap_or(Path::new(".")).to_path_buf();
                for field in [
                    &mut cfg.out,
                    &mut cfg.corpus,
                    &mut cfg.vocab,
                    &mut cfg.lexicon,
                    &mut cfg.judge.cache,
                    &mut cfg.judge.templates,
                ] {
                    resolve(&base, field);
                }
                cfg
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if o.mock_judge {
            self.judge.mode = JudgeMode::Mock;
        }
        if o.grpo {
            self.capo = self.capo.clone().grpo();
        }
        self.capo.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        for (name, path) in [
            ("corpus", &self.corpus),
            ("vocab", &self.vocab),
            ("lexicon", &self.lexicon),
            ("judge.templates", &self.judge.templates),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return bad(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        let s = &self.sft;
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return bad(format!("sft.lr must be > 0, got {}", s.lr));
        }
        if !(s.init_scale >= 0.0 && s.init_scale.is_finite()) {
            return bad(format!("sft.init_scale must be >= 0, got {}", s.init_scale));
        }
        if s.max_classes == 0 {
            return bad("sft.max_classes must be >= 1".into());
        }
        self.capo.validate()?;
        self.explore.mode()?;
        let w = self.explore.weights;
        if [w.bleu2, w.semantic, w.domain].iter().any(|x| !(*x >= 0.0)) || w.bleu2 + w.semantic + w.domain <= 0.0 {
            return bad("explore.weights must be >= 0 with a positive sum".into());
        }
        let j = &self.judge;
        if !(j.timeout_secs > 0.0) {
            return bad("judge.timeout_secs must be > 0".into());
        }
        let t = &self.theory;
        if t.trials == 0 || t.sweep_trials == 0 {
            return bad("theory trials must be >= 1".into());
        }
        if t.max_states == 0 || t.max_actions < 2 {
            return bad("theory needs max_states >= 1 and max_actions >= 2".into());
        }
        if !(t.gamma >= 0.0 && t.gamma < 1.0) {
            return bad(format!("theory.gamma must be in [0, 1), got {}", t.gamma));
        }
        if !(t.eps >= 0.0 && t.eps < 1.0) || t.grid.iter().any(|e| !(*e >= 0.0 && *e < 1.0)) {
            return bad("theory eps values must be in [0, 1)".into());
        }
        if !(t.r_max > 0.0 && t.r_max.is_finite()) {
            return bad("theory.r_max must be > 0".into());
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: set `out` or pass --out".into()))
    }

    pub fn corpus_path(&self) -> Result<&Path, CliError> {
        self.corpus
            .as_deref()
            .ok_or_else(|| CliError::Config("no corpus: set `corpus` in the config".into()))
    }

    pub fn lexicon(&self) -> Result<LabelLexicon, CliError> {
        let lex = match &self.lexicon {
            None => LabelLexicon::carotid(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("lexicon {}: {e}", p.display())))?
            }
        };
        lex.validate().map_err(|e| CliError::Config(format!("lexicon: {e}")))?;
        Ok(lex)
    }

    pub fn reward_config(&self) -> Result<RewardConfig, CliError> {
        let mut rc = RewardConfig::new(self.lexicon()?);
        rc.gamma = self.reward.gamma;
        rc.weights = self.reward.weights;
        rc.threshold = self.reward.threshold;
        rc.validate()?;
        Ok(rc)
    }

    pub fn templates(&self) -> Result<PromptTemplates, CliError> {
        match &self.judge.templates {
            None => Ok(PromptTemplates::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("templates {}: {e}", p.display())))
            }
        }
    }

    /// Remote endpoint with environment overrides applied.
    pub fn remote_settings(&self) -> Result<RemoteSettings, CliError> {
        let j = &self.judge;
        let mut s = RemoteSettings::new(j.url.clone().unwrap_or_default());
        s.timeout_secs = j.timeout_secs;
        s.retries = j.retries;
        s.backoff_ms = j.backoff_ms;
        let s = s.with_env_overrides();
        if s.url.is_empty() {
            return Err(CliError::Config(format!(
                "remote judge needs judge.url or {ENV_JUDGE_URL}; pass --mock-judge for the offline judge"
            )));
        }
        Ok(s)
    }

    /// SHA-256 of the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
