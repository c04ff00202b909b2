//! Cross-feature networks for miniature visual abstract reasoning.
//!
//! The crate is organized around six subsystems:
//!
//! - [`datagen`]: deterministic procedural generators for mini-Bongard and
//!   mini-RPM problems, rule oracles, metadata codebooks, and the on-disk
//!   dataset format.
//! - [`tape`]: a small reverse-mode autodiff engine over `ndarray`, generic
//!   over `f32`/`f64`.
//! - [`model`]: the network family — baseline encoder, the concept/feature
//!   split with a cross-attention decoder, the multi-viewpoint RPM scorer,
//!   the metadata codebook encoder, and the re-space layer.
//! - [`losses`]: closed-form training objectives with hand-derived gradients.
//! - [`train`]: Adam, the alternating-freeze EM schedule, warm-start and
//!   metadata-dropping stages, and the `fit` loop.
//! - [`eval`]: accuracy metrics, pattern-interpretability metrics, ablation
//!   matrices, and report rendering.

pub mod config;
pub mod datagen;
pub mod eval;
pub mod hash;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tape;
pub mod train;

pub use config::{ConfigError, RunConfig};
pub use datagen::{
    Attribute, ConceptFamily, Dataset, DatasetKind, DatasetManifest, MetadataCodebook,
    MiniBongardProblem, MiniRpmProblem, Panel, ProblemSet, Regime, Rule, RuleMetadata, Split,
};
pub use eval::{AblationReport, EvalReport};
pub use losses::{LossReport, LossWeights};
pub use model::{ModelConfig, Variant};
pub use train::{
    Checkpoint, EmMode, EmOrder, EmPhase, EmSchedule, TrainError, TrainPlan, Trainer,
};
