//! Differentiable operators. Each op is a method on [`Tape`](super::Tape)
//! that computes its forward value eagerly and records an adjoint rule.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod sample;
pub mod shape;

pub use sample::{CameraRef, DeformLayout};

