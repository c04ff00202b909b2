//! Network components: the baseline encoder, the concept/feature split with
//! a cross-attention decoder for Bongard problems, the multi-viewpoint RPM
//! scorer with optimizable concept tokens, the metadata codebook encoder,
//! and the re-space layer.
//!
//! Parameter names are hierarchical; the `g_theta.` prefix covers the
//! feature path (panel encoders plus the RPM row/column MLPs) and the
//! `g_omega.` prefix covers the concept path (concept encoder plus the
//! optimizable concept tokens). Those two prefixes are what the alternating
//! EM schedule freezes; everything else trains in every phase.

pub mod bongard;
pub mod codebook;
pub mod layers;
pub mod params;
pub mod rpm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DatasetKind;
use crate::losses::LossWeights;

pub use bongard::{BongardForward, BongardModel};
pub use codebook::CodebookEncoder;
pub use params::{read_params, write_params, Builder, CheckpointError, ParamId, ParamStore, Session};
pub use rpm::{RpmForward, RpmModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown metadata descriptor {0}")]
    UnknownDescriptor(String),
    #[error("model for {model:?} cannot run on a {data:?} dataset")]
    KindMismatch {
        model: DatasetKind,
        data: DatasetKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Cfn,
    TripleCfn,
    MetaTripleCfn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cfn => "cfn",
            Variant::TripleCfn => "triple_cfn",
            Variant::MetaTripleCfn => "meta_triple_cfn",
        }
    }

    /// Does this variant train with the feature decorrelation term?
    pub fn uses_covariance(self) -> bool {
        matches!(self, Variant::TripleCfn | Variant::MetaTripleCfn)
    }

    pub fn uses_metadata(self) -> bool {
        matches!(self, Variant::MetaTripleCfn)
    }
}

fn default_true_temperatures() -> (f64, f64, f64) {
    (1e-3, 1e-6, 1e-2)
}

/// Hyperparameters for every model in the family. RPM models ignore
/// `conv_channels`; Bongard models ignore the patch/viewpoint fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub respace: bool,
    pub embed_dim: usize,
    /// L: viewpoint channels kept from the patch encoder. Must divide the
    /// patch-token count; smaller values mean-pool token groups.
    pub viewpoints: usize,
    /// S: number of optimizable concept tokens.
    pub concept_tokens: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_multiplier: usize,
    /// Hidden width of the row/column bottleneck MLPs.
    pub bottleneck: usize,
    pub patch: usize,
    pub conv_channels: [usize; 3],
    pub t_infonce: f64,
    pub tau_meta: f64,
    pub t_respace: f64,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (t_infonce, tau_meta, t_respace) = default_true_temperatures();
        Self {
            variant: Variant::TripleCfn,
            respace: false,
            embed_dim: 64,
            viewpoints: 16,
            concept_tokens: 2,
            heads: 4,
            depth: 2,
            ff_multiplier: 2,
            bottleneck: 32,
            patch: 8,
            conv_channels: [8, 16, 32],
            t_infonce,
            tau_meta,
            t_respace,
            loss_weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Defaults for mini-RPM models (embed dim 64).
    pub fn rpm_default() -> Self {
        Self::default()
    }

    /// Defaults for mini-Bongard models (embed dim 128, CFN variant).
    pub fn bongard_default() -> Self {
        Self {
            variant: Variant::Cfn,
            embed_dim: 128,
            ..Self::default()
        }
    }

    pub fn ff_dim(&self) -> usize {
        self.embed_dim * self.ff_multiplier
    }

    pub fn patch_tokens(&self) -> usize {
        let grid = crate::datagen::RPM_PANEL_SIDE / self.patch;
        grid * grid
    }

    /// Validates the config against a dataset kind; `s_tilde` is the rule
    /// count per problem when known (meta models need S = S~ + 1).
    pub fn validate(
        &self,
        kind: DatasetKind,
        s_tilde: Option<usize>,
    ) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.t_infonce <= 0.0 || self.tau_meta <= 0.0 || self.t_respace <= 0.0 {
            return fail("temperatures must be positive".into());
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.bottleneck == 0 || self.concept_tokens == 0 {
            return fail("depth, bottleneck and concept_tokens must be at least 1".into());
        }
        match kind {
            DatasetKind::MiniRpm => {
                if self.variant == Variant::Baseline {
                    return fail("the baseline variant is Bongard-only".into());
                }
                if crate::datagen::RPM_PANEL_SIDE % self.patch != 0 {
                    return fail(format!("patch {} must divide 32", self.patch));
                }
                let tokens = self.patch_tokens();
                if self.viewpoints == 0 || tokens % self.viewpoints != 0 {
                    return fail(format!(
                        "viewpoints {} must divide the patch token count {}",
                        self.viewpoints, tokens
                    ));
                }
                if self.variant.uses_metadata() {
                    if let Some(st) = s_tilde {
                        if self.concept_tokens != st + 1 {
                            return fail(format!(
                                "meta variant needs concept_tokens = {} (rule count {} + one free slot), got {}",
                                st + 1,
                                st,
                                self.concept_tokens
                            ));
                        }
                    }
                }
            }
            DatasetKind::MiniBongard => {
                if self.variant.uses_metadata() {
                    return fail("meta variant needs RPM metadata; Bongard problems have none".into());
                }
                if self.variant == Variant::Baseline && self.respace {
                    return fail("the baseline variant has no feature path for a re-space layer".into());
                }
                if self.conv_channels.iter().any(|&c| c == 0) {
                    return fail("conv channels must be positive".into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_requires_s_tilde_plus_one() {
        let mut cfg = ModelConfig::rpm_default();
        cfg.variant = Variant::MetaTripleCfn;
        cfg.concept_tokens = 3;
        assert!(cfg.validate(DatasetKind::MiniRpm, Some(2)).is_ok());
        cfg.concept_tokens = 2;
        assert!(cfg.validate(DatasetKind::MiniRpm, Some(2)).is_err());
    }

    #[test]
    fn temperature_and_head_checks() {
        let mut cfg = ModelConfig::rpm_default();
        cfg.tau_meta = 0.0;
        assert!(cfg.validate(DatasetKind::MiniRpm, None).is_err());
        let mut cfg = ModelConfig::rpm_default();
        cfg.embed_dim = 62;
        assert!(cfg.validate(DatasetKind::MiniRpm, None).is_err());
        let mut cfg = ModelConfig::rpm_default();
        cfg.viewpoints = 5;
        assert!(cfg.validate(DatasetKind::MiniRpm, None).is_err());
        cfg.viewpoints = 8;
        assert!(cfg.validate(DatasetKind::MiniRpm, None).is_ok());
    }

    #[test]
    fn baseline_is_bongard_only() {
        let mut cfg = ModelConfig::rpm_default();
        cfg.variant = Variant::Baseline;
        assert!(cfg.validate(DatasetKind::MiniRpm, None).is_err());
        let mut cfg = ModelConfig::bongard_default();
        cfg.variant = Variant::Baseline;
        assert!(cfg.validate(DatasetKind::MiniBongard, None).is_ok());
        cfg.respace = true;
        assert!(cfg.validate(DatasetKind::MiniBongard, None).is_err());
    }
}
