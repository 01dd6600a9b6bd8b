//! Synthetic carotid report grammar.
//!
//! Each sample is one scenario at one vessel location. The prompt names
//! both, and the reference is fully determined by the prompt. Findings and
//! Impression use disjoint wording, so within one report every token has a
//! single successor and a bigram policy conditioned on the prompt can
//! reproduce it exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Criticality, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Normal,
    SoftPlaque,
    HardPlaque,
    MixedPlaque,
    Stenosis,
    Occlusion,
}

pub const SCENARIOS: [Scenario; 6] = [
    Scenario::Normal,
    Scenario::SoftPlaque,
    Scenario::HardPlaque,
    Scenario::MixedPlaque,
    Scenario::Stenosis,
    Scenario::Occlusion,
];

pub const LOCATIONS: [&str; 4] = ["bulb", "bifurcation", "ica", "cca"];

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Normal => "normal",
            Scenario::SoftPlaque => "soft_plaque",
            Scenario::HardPlaque => "hard_plaque",
            Scenario::MixedPlaque => "mixed_plaque",
            Scenario::Stenosis => "stenosis",
            Scenario::Occlusion => "occlusion",
        }
    }

    fn findings_head(self) -> &'static str {
        match self {
            Scenario::Normal => "smooth intima",
            Scenario::SoftPlaque => "hypoechoic plaque",
            Scenario::HardPlaque => "calcified plaque",
            Scenario::MixedPlaque => "heterogeneous plaque",
            Scenario::Stenosis => "stenotic plaque",
            Scenario::Occlusion => "occluded lumen",
        }
    }

    fn impression(self) -> &'static str {
        match self {
            Scenario::Normal => "normal study",
            Scenario::SoftPlaque => "soft atheroma",
            Scenario::HardPlaque => "hard atheroma",
            Scenario::MixedPlaque => "mixed atheroma",
            Scenario::Stenosis => "significant stenosis",
            Scenario::Occlusion => "complete occlusion",
        }
    }

    /// Label the mock criticality rule assigns to this scenario.
    pub fn criticality(self) -> Criticality {
        match self {
            Scenario::Normal => Criticality::Normal,
            _ => Criticality::Critical,
        }
    }

    pub fn reference(self, location: &str) -> String {
        format!(
            "FINDINGS: {} in the {location}.\nIMPRESSION: {}",
            self.findings_head(),
            self.impression()
        )
    }

    pub fn prompt(self, location: &str) -> String {
        format!("{} {location}", self.name())
    }
}

/// `n` samples with uniformly drawn scenario and location. Ids are
/// `s0000`, `s0001`, ...; criticality is left unannotated.
pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let sc = SCENARIOS[rng.random_range(0..SCENARIOS.len())];
            let loc = LOCATIONS[rng.random_range(0..LOCATIONS.len())];
            Sample::new(format!("s{i:04}"), sc.prompt(loc), &sc.reference(loc))
        })
        .collect();
    Corpus::new(samples)
}

/// Scenario encoded in a fixture prompt.
pub fn scenario_of(prompt: &str) -> Option<Scenario> {
    let name = prompt.split_whitespace().next()?;
    SCENARIOS.iter().copied().find(|s| s.name() == name)
}

/// First `n - held_out` samples and the rest.
pub fn split(corpus: &Corpus, held_out: usize) -> (Corpus, Corpus) {
    let cut = corpus.len().saturating_sub(held_out);
    (
        Corpus::new(corpus.samples[..cut].to_vec()),
        Corpus::new(corpus.samples[cut..].to_vec()),
    )
}
