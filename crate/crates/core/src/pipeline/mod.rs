//! Run configuration, datasets on disk, the assembled model, training,
//! checkpoints and the experiment commands behind the CLI.

mod checkpoint;
mod commands;
mod config;
mod dataset;
mod model;
mod train;

pub use checkpoint::{file_sha256, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    ablation_table, cmd_ablate, cmd_eval, cmd_export, cmd_generate, cmd_train, evaluate, load_model,
    majority_baseline, read_loss_log, AblateAxis, AblationRow, EvalOptions, EvalSummary, ExportSource,
    CHECKPOINT_FILE, LOSS_LOG,
};
pub use config::{LossWeights, RunConfig, TrainConfig};
pub use dataset::{scene_seed, Dataset, Scene};
pub use model::{build_groups, LossBreakdown, Model, Prepared};
pub use train::{StepLog, Trainer};

use crate::decoder::DecoderError;
use crate::encoder::EncoderError;
use crate::metrics::MetricsError;
use crate::scene::SceneError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Short category used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Config(_) | Self::Encoder(EncoderError::Config(_)) => "config",
            Self::Data(_) | Self::Scene(_) => "data",
            Self::Mismatch(_) => "mismatch",
            Self::Checkpoint(_) => "checkpoint",
            Self::NonFinite { .. } | Self::Tensor(TensorError::NonFinite { .. }) => "numeric",
            Self::Io(_) => "io",
            Self::Encoder(_) | Self::Decoder(_) | Self::Tensor(_) => "model",
            Self::Metrics(_) => "metrics",
        }
    }

    /// Process exit code per category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "data" => 4,
            "mismatch" => 5,
            "checkpoint" => 6,
            "numeric" => 7,
            _ => 1,
        }
    }
}
