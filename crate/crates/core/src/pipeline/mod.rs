//! Training, tracking, evaluation and checkpoint orchestration.

mod augment;
mod checkpoint;
mod data;
mod eval;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ensure_arg, Result};

pub use augment::Symmetry;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo, FORMAT_VERSION};
pub use data::{
    crop_around, prepare_pair, prepare_records, record_id, to_isotropic, PreparedSet,
    RegistrationCache,
};
pub use eval::{
    evaluate, evaluate_predictions, evaluate_prepared, read_predictions, track, write_eval_outputs,
    EvalOptions, EvalOutcome, PairResult, Prediction, TrackResult,
};
pub use model::{Ablation, Forward, ModelConfig, PairData, Target, TrackerModel};
pub use train::{pair_gradients, train, train_prepared, EpochSummary, StepLog, TrainOutcome};

/// Name of the effective configuration written into output directories.
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `toy` or `full`; selects the defaults every other field overrides.
    pub preset: String,
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Training aborts when more than this fraction of pairs is skipped.
    pub max_skip_fraction: f64,
    /// Sequential execution only.
    pub deterministic: bool,
    /// Each training step sees its pair under a random axis permutation
    /// and reflection.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            preset: "toy".into(),
            model: ModelConfig::toy(),
            lr: 1e-4,
            epochs: 60,
            batch_size: 2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            max_skip_fraction: 0.2,
            deterministic: false,
            augment: true,
        }
    }

    pub fn full() -> Self {
        TrainConfig {
            preset: "full".into(),
            model: ModelConfig::full(),
            epochs: 300,
            augment: false,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown preset {other:?}; expected toy or full"
            ))),
        }
    }

    /// Preset defaults overlaid with the fields present in `overrides`.
    pub fn from_json(overrides: &Value) -> Result<Self> {
        let preset = overrides.get("preset").and_then(Value::as_str).unwrap_or("toy");
        let mut base = serde_json::to_value(Self::preset(preset)?)?;
        merge(&mut base, overrides);
        let cfg: TrainConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure_arg!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure_arg!(self.epochs >= 1, "epochs must be >= 1");
        ensure_arg!(self.batch_size >= 1, "batch size must be >= 1");
        ensure_arg!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "moment coefficients must be in [0, 1)"
        );
        ensure_arg!(
            (0.0..=1.0).contains(&self.max_skip_fraction),
            "skip fraction must be in [0, 1]"
        );
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
