//! Experiment configuration, training, evaluation, ablations, robustness
//! sweeps and attention dumps.

pub mod ablate;
pub mod attention;
pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod robustness;
pub mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detection::{DetectionError, LossWeights};
use crate::model::{ModelConfig, ModelError};
use crate::scenegen::{SceneConfig, ScenegenError};
use crate::tensor::TensorError;

pub use ablate::{ablate, ablation_rows, AblationRow, AblationTable, RowResult};
pub use attention::{dump_attention, read_manifest, AttentionManifest, MapEntry, MapKind, VISUAL_THRESHOLD};
pub use checkpoint::Checkpoint;
pub use eval::{eval, evaluate_model, EvalRecord, EvalSplit};
pub use optim::{cosine_lr, Adam};
pub use robustness::{robustness_sweep, RobustnessCurve, RobustnessReport};
pub use train::{train, Divergence, StepLog, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Scenegen(#[from] ScenegenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint config hash {found} does not match {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("query id {id} out of range for {queries} queries")]
    QueryId { id: usize, queries: usize },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io_error(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Floor of the cosine schedule, as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Scenes `0..train_scenes` (offset by the data seed) form the training set.
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Held-out scenes start at this offset from the data seed.
    pub eval_offset: u64,
    pub loss: LossWeights,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 2e-3,
            min_lr_ratio: 0.05,
            warmup: 50,
            weight_decay: 0.0,
            grad_clip: 10.0,
            train_scenes: 2000,
            eval_scenes: 200,
            eval_offset: 1_000_000,
            loss: LossWeights::default(),
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: SceneConfig,
    pub train: TrainConfig,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let m = &self.model;
        let d = &self.data;
        if m.width != d.channels {
            return Err(HarnessError::Config(format!(
                "model width {} differs from feature channels {}",
                m.width, d.channels
            )));
        }
        if m.depth_bins != d.depth_bins || m.classes != d.classes || m.bounds != d.bounds {
            return Err(HarnessError::Config(
                "model and data disagree on depth bins, classes or bounds".into(),
            ));
        }
        if m.queries < d.objects[1] {
            return Err(HarnessError::Config(
                "fewer queries than the maximum object count".into(),
            ));
        }
        let t = &self.train;
        if t.batch == 0 || t.train_scenes == 0 {
            return Err(HarnessError::Config("batch and train_scenes must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(HarnessError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the model and data sections,
    /// which determine what a checkpoint can be evaluated on.
    pub fn model_hash(&self) -> String {
        let canonical = serde_json::to_string(&(&self.model, &self.data)).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// SHA-256 of the full configuration.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// A tiny model on a short schedule, for smoke runs and tests.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.model.width = 16;
        cfg.data.channels = 16;
        cfg.model.queries = 4;
        cfg.model.layers = 1;
        cfg.model.heads = 2;
        cfg.data.objects = [1, 2];
        cfg.train.steps = 50;
        cfg.train.batch = 2;
        cfg.train.warmup = 5;
        cfg.train.log_every = 10;
        cfg.train.eval_scenes = 8;
        cfg
    }

    /// Scene seed of training scene `i`.
    pub fn train_seed(&self, i: usize) -> u64 {
        self.data.seed.wrapping_add(i as u64)
    }

    /// Scene seed of held-out scene `i`.
    pub fn eval_seed(&self, i: usize) -> u64 {
        self.data
            .seed
            .wrapping_add(self.train.eval_offset)
            .wrapping_add(i as u64)
    }
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(io_error(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.config_hash(), ExperimentConfig::default().config_hash());
        assert_eq!(cfg.config_hash().len(), 64);
        let other = ExperimentConfig {
            seed: 1,
            ..Default::default()
        };
        assert_ne!(cfg.config_hash(), other.config_hash());
        assert_eq!(cfg.model_hash(), other.model_hash());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 7, "train": {"steps": 10}}"#, "inline").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch, TrainConfig::default().batch);
    }

    #[test]
    fn mismatched_width_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.width = 16;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        assert!(ExperimentConfig::from_json("{\"seed\": ", "inline").is_err());
    }
}
