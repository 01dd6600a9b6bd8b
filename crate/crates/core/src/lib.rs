//! Reinforcement fine-tuning of report generators with hierarchical
//! rewards, criticality-gated clipping and hard-example selection.

pub mod corpus;
pub mod explore;
pub mod fixture;
pub mod judge;
pub mod metrics;
pub mod optimizer;
pub mod policy;
pub mod reward;
pub mod theory;

pub use corpus::{Corpus, Criticality, ParseStatus, Sample, SectionHeaders, SectionedReport};
pub use explore::{ExploreConfig, ScoreRecord, SelectionMode};
pub use judge::{Judge, JudgeError};
pub use metrics::{LabelLexicon, TokenSeq};
pub use optimizer::{CapoConfig, StepStats, TrainContext, Trainer};
pub use policy::{Checkpoint, Policy, PolicyParams, ReportCodec, Snapshot, Vocab};
pub use reward::{RewardBreakdown, RewardConfig};
pub use theory::{Mdp, TabularPolicy};
