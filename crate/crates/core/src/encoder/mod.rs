//! Geometry-aware occupancy encoder: image features and depth, explicit
//! lifting into a voxel volume, multi-scale 3D encoding, a compact volume
//! refined by image cross-attention and self-attention, and upsampling back
//! to the full grid.

mod featurizer;
mod ivt;
mod lift;
mod unet;

pub use featurizer::{depth_targets, images_to_value, FeaturizerOutput, ImageFeaturizer};
pub use ivt::{
    compact_centers, project_voxel_centers, IvtLayer, SelfAttentionBlock, SpatialCrossAttention, VoxelProjection,
};
pub use lift::{lifted_positions, DepthBins};
pub use unet::{resample_to, upsample_strides, CompactFuser, MultiScaleEncoder, ResBlock, Upsampler, PYRAMID_LEVELS};

use rand_chacha::ChaCha8Rng;

use crate::layers::{tokens_to_volume, volume_to_tokens};
use crate::scene::{CameraRig, GridSpec};
use crate::tensor::{ConvSpec, Init, NdValue, ParamId, ParamStore, Tape, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: [usize; 2],
    pub featurizer_hidden: usize,
    /// Stride-2 stages in the image featurizer.
    pub featurizer_strides: usize,
    /// Image feature channels, which is also the channel count of `O_E`.
    pub feature_channels: usize,
    pub depth: DepthBins,
    pub res_blocks: usize,
    pub compact_ratio: [usize; 3],
    pub query_dim: usize,
    pub heads: usize,
    pub samples: usize,
    pub ivt_layers: usize,
    pub ffn_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: [32, 56],
            featurizer_hidden: 32,
            featurizer_strides: 2,
            feature_channels: 8,
            depth: DepthBins { min: 0.5, max: 12.5, count: 16 },
            res_blocks: 2,
            compact_ratio: [4, 4, 1],
            query_dim: 32,
            heads: 8,
            samples: 4,
            ivt_layers: 1,
            ffn_hidden: 64,
        }
    }
}

/// Tensor shapes `[C, X, Y, Z]` along the encoder for a given grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub explicit: [usize; 4],
    pub pyramid: Vec<[usize; 4]>,
    pub compact: [usize; 4],
    pub full: [usize; 4],
}

impl EncoderConfig {
    pub fn feature_stride(&self) -> usize {
        1 << self.featurizer_strides
    }

    pub fn feature_size(&self) -> [usize; 2] {
        self.image_size.map(|s| s / self.feature_stride())
    }

    pub fn compact_dims(&self, grid: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| grid[a] / self.compact_ratio[a])
    }

    pub fn validate(&self, grid: [usize; 3]) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        let s = self.feature_stride();
        if self.image_size.iter().any(|&d| d == 0 || d % s != 0) {
            return bad(format!("image size {:?} not divisible by stride {s}", self.image_size));
        }
        for a in 0..3 {
            let r = self.compact_ratio[a];
            if r == 0 || !grid[a].is_multiple_of(r) {
                return bad(format!("grid axis {a} ({}) not divisible by compact ratio {r}", grid[a]));
            }
        }
        if upsample_strides(self.compact_ratio).is_none() {
            return bad(format!("compact ratio {:?} must be powers of two", self.compact_ratio));
        }
        let f = 1 << (PYRAMID_LEVELS - 1);
        if grid.iter().any(|d| d % f != 0) {
            return bad(format!("grid {grid:?} not divisible by {f}"));
        }
        if self.heads == 0 || !self.query_dim.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide query dim {}", self.heads, self.query_dim));
        }
        if self.samples == 0 || self.depth.count == 0 || !(self.depth.max > self.depth.min) {
            return bad("samples and depth bins must be positive".into());
        }
        Ok(())
    }

    /// Shapes computed with the same layer arithmetic as the forward pass.
    pub fn shape_plan(&self, grid: [usize; 3]) -> Result<ShapePlan, EncoderError> {
        self.validate(grid)?;
        let c0 = self.feature_channels;
        let mut pyramid = vec![[c0, grid[0], grid[1], grid[2]]];
        let down = ConvSpec::cube(3, 2, 1);
        for l in 1..PYRAMID_LEVELS {
            let p = pyramid[l - 1];
            let d = down
                .conv_output_dims([p[1], p[2], p[3]])
                .ok_or_else(|| EncoderError::Config("pyramid collapsed".into()))?;
            pyramid.push([c0 << l, d[0], d[1], d[2]]);
        }
        let cd = self.compact_dims(grid);
        let mut dims = cd;
        for st in upsample_strides(self.compact_ratio).unwrap_or_default() {
            let spec = ConvSpec::anisotropic(st, st, [0; 3]);
            dims = spec.transpose_output_dims(dims).expect("positive dims");
        }
        let q = self.query_dim;
        Ok(ShapePlan {
            explicit: [c0, grid[0], grid[1], grid[2]],
            pyramid,
            compact: [q, cd[0], cd[1], cd[2]],
            full: [q, dims[0], dims[1], dims[2]],
        })
    }
}

/// Rig-dependent constants of the forward pass.
pub struct EncoderGeometry {
    pub grid: GridSpec,
    pub lifted: Vec<[f64; 3]>,
    pub projection: VoxelProjection,
    pub compact_dims: [usize; 3],
}

impl EncoderGeometry {
    pub fn new(cfg: &EncoderConfig, grid: &GridSpec, rig: &CameraRig) -> Result<Self, EncoderError> {
        cfg.validate(grid.dims)?;
        if rig.cameras.iter().any(|c| [c.height, c.width] != cfg.image_size) {
            return Err(EncoderError::Config("camera image size differs from encoder config".into()));
        }
        let [hf, wf] = cfg.feature_size();
        let centers = compact_centers(grid, cfg.compact_ratio);
        Ok(Self {
            grid: *grid,
            lifted: lifted_positions(rig, &cfg.depth, hf, wf, cfg.feature_stride()),
            projection: project_voxel_centers(&centers, rig, cfg.feature_stride()),
            compact_dims: cfg.compact_dims(grid.dims),
        })
    }
}

pub struct EncoderOutput {
    pub features: Var,
    pub depth_logits: Var,
    pub depth: Var,
    pub explicit: Var,
    pub pyramid: Vec<Var>,
    /// `O_c` after the IVT layers, `[C_Q, Xc, Yc, Zc]`.
    pub compact: Var,
    /// `O`, `[C_Q, X, Y, Z]`.
    pub full: Var,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub featurizer: ImageFeaturizer,
    pub multiscale: MultiScaleEncoder,
    pub fuser: CompactFuser,
    pub ivt: Vec<IvtLayer>,
    pub pos: ParamId,
    pub upsampler: Upsampler,
    /// When false the IVT layers are skipped (ablation).
    pub ivt_enabled: bool,
}

impl Encoder {
    pub fn new(
        cfg: &EncoderConfig,
        grid: [usize; 3],
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        cfg.validate(grid)?;
        let c0 = cfg.feature_channels;
        let q = cfg.query_dim;
        let featurizer =
            ImageFeaturizer::new(store, rng, cfg.featurizer_hidden, c0, cfg.depth.count, cfg.featurizer_strides);
        let multiscale = MultiScaleEncoder::new(store, rng, c0, cfg.res_blocks);
        let fuser = CompactFuser::new(store, rng, c0, q);
        let ivt = (0..cfg.ivt_layers)
            .map(|l| IvtLayer::new(store, rng, &format!("ivt{l}"), c0, q, cfg.heads, cfg.samples, cfg.ffn_hidden))
            .collect();
        let n_compact: usize = cfg.compact_dims(grid).iter().product();
        let pos = store.add("ivt.pos", &[n_compact, q], Init::Uniform(0.1), rng);
        let upsampler = Upsampler::new(store, rng, c0, q, cfg.compact_ratio)
            .ok_or_else(|| EncoderError::Config("compact ratio must be powers of two".into()))?;
        Ok(Self { cfg: cfg.clone(), featurizer, multiscale, fuser, ivt, pos, upsampler, ivt_enabled: true })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        images: &NdValue,
        geo: &EncoderGeometry,
    ) -> Result<EncoderOutput, EncoderError> {
        let img = t.constant(images.clone());
        let FeaturizerOutput { features, depth_logits, depth } = self.featurizer.forward(t, store, img)?;
        let points = t.lift_outer_product(features, depth)?;
        let explicit = t.voxel_pool(points, &geo.lifted, &geo.grid)?;
        let pyramid = self.multiscale.forward(t, store, explicit)?;
        let mut compact = self.fuser.forward(t, store, &pyramid, geo.compact_dims)?;
        if self.ivt_enabled && !self.ivt.is_empty() {
            let mut tokens = volume_to_tokens(t, compact)?;
            let pos = t.param(store, self.pos);
            for layer in &self.ivt {
                tokens = layer.forward(t, store, tokens, features, &geo.projection, Some(pos))?;
            }
            compact = tokens_to_volume(t, tokens, geo.compact_dims)?;
        }
        let full = self.upsampler.forward(t, store, compact, &pyramid)?;
        Ok(EncoderOutput { features, depth_logits, depth, explicit, pyramid, compact, full })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_shape_plan() {
        let p = EncoderConfig::default().shape_plan([32, 32, 8]).unwrap();
        assert_eq!(p.pyramid, vec![[8, 32, 32, 8], [16, 16, 16, 4], [32, 8, 8, 2]]);
        assert_eq!(p.compact, [32, 8, 8, 8]);
        assert_eq!(p.full, [32, 32, 32, 8]);
    }

    #[test]
    fn rejects_indivisible_grid() {
        let cfg = EncoderConfig::default();
        assert!(cfg.shape_plan([30, 32, 8]).is_err());
        assert!(EncoderConfig { compact_ratio: [3, 3, 1], ..cfg }.validate([24, 24, 8]).is_err());
    }
}
