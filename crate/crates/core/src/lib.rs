//! Compact occupancy transformer for camera-based 3D semantic occupancy
//! prediction, with a synthetic scene generator and evaluation tooling.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod tensor;
