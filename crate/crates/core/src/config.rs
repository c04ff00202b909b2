//! Run configuration: one JSON document with `data`, `model`, `train`,
//! `eval`, and `io` sections. Unknown keys are rejected with their full key
//! path, and the canonicalized document hashes to a 64-bit id that gets
//! stamped into every artifact a run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::canonical_json_hash;
use crate::model::ModelConfig;
use crate::train::{EmSchedule, TrainPlan};

/// Environment variable that re-roots relative output directories.
pub const OUT_ROOT_ENV: &str = "CROSSFEAT_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub em: EmSchedule,
    pub drop_meta: bool,
    pub freeze_g_theta: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let plan = TrainPlan::default();
        Self {
            epochs: plan.epochs,
            batch_size: plan.batch_size,
            chunk_size: plan.chunk_size,
            lr: plan.lr,
            weight_decay: plan.weight_decay,
            seed: plan.seed,
            em: plan.em,
            drop_meta: plan.drop_meta,
            freeze_g_theta: plan.freeze_g_theta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "test".to_string(),
            plots: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub io: IoSection,
}

/// Key schema used to produce full-path errors before serde parsing.
fn known_keys(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "" => Some(&["data", "model", "train", "eval", "io"]),
        "data" => Some(&["dir"]),
        "model" => Some(&[
            "variant",
            "respace",
            "embed_dim",
            "viewpoints",
            "concept_tokens",
            "heads",
            "depth",
            "ff_multiplier",
            "bottleneck",
            "patch",
            "conv_channels",
            "t_infonce",
            "tau_meta",
            "t_respace",
            "loss_weights",
        ]),
        "model.loss_weights" => Some(&["covariance", "metadata", "respace"]),
        "train" => Some(&[
            "epochs",
            "batch_size",
            "chunk_size",
            "lr",
            "weight_decay",
            "seed",
            "em",
            "drop_meta",
            "freeze_g_theta",
        ]),
        "train.em" => Some(&["mode", "period", "order", "warmup_epochs"]),
        "eval" => Some(&["split", "plots"]),
        "io" => Some(&["out_dir"]),
        _ => None,
    }
}

fn check_keys(value: &serde_json::Value, path: &str) -> Result<(), ConfigError> {
    let Some(obj) = value.as_object() else {
        return Ok(());
    };
    if let Some(allowed) = known_keys(path) {
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                let full = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                return Err(ConfigError::UnknownKey(full));
            }
        }
    }
    for (key, child) in obj {
        let child_path = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        if known_keys(&child_path).is_some() {
            check_keys(child, &child_path)?;
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(raw: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(raw)?;
        check_keys(&value, "")?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// 64-bit hash of the canonicalized document.
    pub fn canonical_hash(&self) -> u64 {
        let value = serde_json::to_value(self).expect("config serializes");
        canonical_json_hash(&value)
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.canonical_hash())
    }

    /// Output directory, re-rooted under `CROSSFEAT_OUT` when that is set
    /// and the configured path is relative.
    pub fn out_dir(&self) -> PathBuf {
        if self.io.out_dir.is_relative() {
            if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
                return PathBuf::from(root).join(&self.io.out_dir);
            }
        }
        self.io.out_dir.clone()
    }

    /// Assembles the training plan, stamping the config hash.
    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            model: self.model.clone(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            chunk_size: self.train.chunk_size,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            em: self.train.em,
            drop_meta: self.train.drop_meta,
            freeze_g_theta: self.train.freeze_g_theta,
            config_hash: self.hash_hex(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "data": {"dir": "data/rpm"},
            "io": {"out_dir": "runs/x"}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse(&minimal()).unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert_eq!(cfg.model.embed_dim, 64);
        assert_eq!(cfg.eval.split, "test");
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let raw = r#"{
            "data": {"dir": "d"},
            "io": {"out_dir": "o"},
            "train": {"em": {"mode": "off", "cadence": 3}}
        }"#;
        match RunConfig::parse(raw) {
            Err(ConfigError::UnknownKey(path)) => assert_eq!(path, "train.em.cadence"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        let raw = r#"{"data": {"dir": "d"}, "io": {"out_dir": "o"}, "modle": {}}"#;
        match RunConfig::parse(raw) {
            Err(ConfigError::UnknownKey(path)) => assert_eq!(path, "modle"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn hash_is_stable_and_key_order_independent() {
        let a = RunConfig::parse(&minimal()).unwrap();
        let b = RunConfig::parse(
            r#"{
                "io": {"out_dir": "runs/x"},
                "data": {"dir": "data/rpm"}
            }"#,
        )
        .unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());
        let mut c = a.clone();
        c.train.seed = 1;
        assert_ne!(a.canonical_hash(), c.canonical_hash());
    }

    #[test]
    fn plan_carries_the_hash() {
        let cfg = RunConfig::parse(&minimal()).unwrap();
        let plan = cfg.train_plan();
        assert_eq!(plan.config_hash, cfg.hash_hex());
    }
}
