//! Synthetic voxel worlds, camera rigs, rendering and visibility.

pub mod camera;
mod grid;
mod ply;
pub mod raycast;
mod render;
mod synth;

pub use camera::{place_camera_rig, Camera, CameraRig, Intrinsics, Pose, RigSpec};
pub use grid::{class_histogram, Category, CategoryTable, GridSpec, SemanticVoxelGrid, EMPTY};
pub use ply::{export_ply, parse_ply_voxels};
pub use render::{compute_visible_mask, palette, VISIBILITY_SUBSAMPLES, read_mask, render_view, write_mask, RenderedView};
pub use synth::{generate_scene, CategorySpec, ClassDistributionSpec, Primitive};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("label {0} is not in the category table")]
    UnknownCategory(u16),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
