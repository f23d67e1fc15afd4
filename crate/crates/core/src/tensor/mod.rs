//! Numeric substrate: dense arrays, a reverse-mode tape, the operator set the
//! model is built from, and the AdamW optimizer.

mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod tape;
mod value;

pub use gradcheck::{check_gradients, central_difference, GradCheckReport};
pub use ops::conv::ConvSpec;
pub use ops::sample::SampleValidity;
pub use optim::{clip_grad_norm, global_norm, AdamW, OptimizerState};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{BackwardCtx, Gradients, OpStats, OpTimes, Tape, Var};
pub use value::NdValue;

pub(crate) use value::axis_extents;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
