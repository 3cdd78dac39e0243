//! Prediction heads, set matching, losses and desk-scale metrics.

pub mod boxes;
pub mod heads;
pub mod hungarian;
pub mod loss;
pub mod metrics;

use thiserror::Error;

use crate::tensor::TensorError;

pub use boxes::{decode, encode, wrap_angle, Box3D, SceneBounds, BOX_CODE};
pub use heads::{decode_predictions, DetectionHeads};
pub use hungarian::{hungarian_match, Assignment};
pub use loss::{
    focal_loss, frame_loss, generate_prev_gt, match_cost, total_loss, FrameOutput, LayerOutput, LossBreakdown,
    LossWeights,
};
pub use metrics::{desk_map, evaluate, DeskMetrics, Detection};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{gts} ground truths cannot be matched to {queries} queries")]
    TooManyTargets { gts: usize, queries: usize },
    #[error("matching cost contains a non-finite entry")]
    NonFiniteCost,
    #[error("invalid box {0:?}")]
    InvalidBox(Box3D),
    #[error("empty scene bounds {min:?}..{max:?}")]
    EmptyBounds { min: [f64; 3], max: [f64; 3] },
}

pub type Result<T, E = DetectionError> = std::result::Result<T, E>;
