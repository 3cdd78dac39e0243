use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_error, optim::Adam, write_json, ExperimentConfig, HarnessError, Result};
use crate::model::CapeModel;
use crate::tensor::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position does not fit in a JSON number.
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

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| HarnessError::Parse {
            path: "checkpoint".into(),
            message: format!("invalid rng {what}"),
        };
        let seed: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Everything needed to resume training bit-identically or to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub step: usize,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub rng: RngState,
}

impl Checkpoint {
    /// Rebuilds the model structure and checks it against the stored
    /// parameters.
    pub fn model(&self) -> Result<(CapeModel, ParamStore)> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let model = CapeModel::new(self.config.model.clone(), &mut scratch, &mut rng)?;
        if !scratch.same_layout(&self.params) {
            return Err(HarnessError::Config(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        Ok((model, self.params.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(HarnessError::Parse {
                path: path.display().to_string(),
                message: format!("unsupported checkpoint version {}", ckpt.format_version),
            });
        }
        if ckpt.config.config_hash() != ckpt.config_hash {
            return Err(HarnessError::ConfigMismatch {
                expected: ckpt.config.config_hash(),
                found: ckpt.config_hash,
            });
        }
        Ok(ckpt)
    }
}
