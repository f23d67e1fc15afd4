//! Implicit view transformation: voxel-centre projection, spatial
//! cross-attention into the image features, and voxel self-attention.

use rand_chacha::ChaCha8Rng;

use crate::layers::{Conv, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::scene::{CameraRig, GridSpec};
use crate::tensor::ops::{CameraRef, DeformLayout};
use crate::tensor::{ConvSpec, Init, NdValue, ParamStore, Result, Tape, Var};

/// Metric centres of the compact cells, in `[X, Y, Z]` flat order (z fastest).
pub fn compact_centers(grid: &GridSpec, ratio: [usize; 3]) -> Vec<[f64; 3]> {
    let dims = [0, 1, 2].map(|a| grid.dims[a] / ratio[a]);
    let mut out = Vec::with_capacity(dims.iter().product());
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let c = [x, y, z];
                out.push([0, 1, 2].map(|a| {
                    grid.origin[a] + (c[a] as f64 + 0.5) * ratio[a] as f64 * grid.voxel_size
                }));
            }
        }
    }
    out
}

/// Projection of each point into each camera.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelProjection {
    /// `[point][camera]` continuous image coordinates, `None` when behind the
    /// camera or outside the image.
    pub pixels: Vec<Option<(f64, f64)>>,
    /// Matching reference points in feature-map coordinates.
    pub refs: Vec<CameraRef>,
    pub cameras: usize,
}

impl VoxelProjection {
    pub fn has_valid_camera(&self, q: usize) -> bool {
        self.refs[q * self.cameras..(q + 1) * self.cameras].iter().any(|r| r.valid)
    }
}

pub fn project_voxel_centers(centers: &[[f64; 3]], rig: &CameraRig, feature_stride: usize) -> VoxelProjection {
    let s = feature_stride as f64;
    let mut pixels = Vec::with_capacity(centers.len() * rig.len());
    let mut refs = Vec::with_capacity(centers.len() * rig.len());
    for &p in centers {
        for cam in &rig.cameras {
            match cam.project(p) {
                Some((u, v, _)) if cam.in_image(u, v) => {
                    pixels.push(Some((u, v)));
                    refs.push(CameraRef { valid: true, x: u / s - 0.5, y: v / s - 0.5 });
                }
                _ => {
                    pixels.push(None);
                    refs.push(CameraRef { valid: false, x: 0.0, y: 0.0 });
                }
            }
        }
    }
    VoxelProjection { pixels, refs, cameras: rig.len() }
}

/// Deformable attention from voxel queries into multi-camera features.
pub struct SpatialCrossAttention {
    norm: LayerNorm,
    value_proj: Conv,
    offsets: Linear,
    weights: Linear,
    out: Linear,
    pub heads: usize,
    pub samples: usize,
}

impl SpatialCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_img: usize,
        c_q: usize,
        heads: usize,
        samples: usize,
    ) -> Self {
        let norm = LayerNorm::new(store, rng, &format!("{name}.norm"), c_q);
        let value_proj = Conv::new(store, rng, &format!("{name}.value"), c_img, c_q, ConvSpec::pointwise());
        let n_off = heads * samples * 2;
        let ow = store.add(format!("{name}.offsets.w"), &[c_q, n_off], Init::Zeros, rng);
        // fixed dilation pattern: head h looks along angle 2πh/H at radii 0.5, 1, 1.5, ...
        let mut bias = vec![0.0; n_off];
        for h in 0..heads {
            let theta = std::f64::consts::TAU * h as f64 / heads as f64;
            for r in 0..samples {
                let rad = 0.5 * (r + 1) as f64;
                bias[(h * samples + r) * 2] = rad * theta.cos();
                bias[(h * samples + r) * 2 + 1] = rad * theta.sin();
            }
        }
        let ob = store.insert(format!("{name}.offsets.b"), NdValue::new([n_off], bias).expect("bias shape"));
        Self {
            norm,
            value_proj,
            offsets: Linear { w: ow, b: ob, d_in: c_q, d_out: n_off },
            weights: Linear::new(store, rng, &format!("{name}.weights"), c_q, heads * samples),
            out: Linear::zeros(store, rng, &format!("{name}.out"), c_q, c_q),
            heads,
            samples,
        }
    }

    /// `queries[Nq, C_Q]`, `features[C_img, Ncam, Hf, Wf]`; residual output.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        queries: Var,
        features: Var,
        proj: &VoxelProjection,
    ) -> Result<Var> {
        let nq = t.shape(queries)[0];
        let c_q = t.shape(queries)[1];
        let q = self.norm.forward(t, store, queries)?;
        let value = self.value_proj.forward(t, store, features)?;
        let off = self.offsets.forward(t, store, q)?;
        let wl = self.weights.forward(t, store, q)?;
        let wl = t.reshape(wl, &[nq * self.heads, self.samples])?;
        let w = t.softmax(wl, 1)?;
        let layout = DeformLayout { queries: nq, heads: self.heads, samples: self.samples };
        let att = t.deformable_attention_2d(value, &proj.refs, off, w, layout)?;
        let upd = self.out.forward(t, store, att)?;
        // queries seen by no camera keep their input exactly
        let mask = NdValue::from_fn([nq, c_q], |i| proj.has_valid_camera(i / c_q) as u8 as f64);
        let mask = t.constant(mask);
        let upd = t.mul(upd, mask)?;
        t.add(queries, upd)
    }
}

/// Pre-norm self-attention and feed-forward over the voxel sequence.
pub struct SelfAttentionBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, hidden),
        }
    }

    /// `x[N, d]` with positional embedding `pos[N, d]` added to queries and keys.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, pos: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(t, store, x)?;
        let qk = match pos {
            Some(p) => t.add(h, p)?,
            None => h,
        };
        let a = self.attn.forward(t, store, qk, qk, h)?;
        let x = t.add(x, a)?;
        let h = self.norm2.forward(t, store, x)?;
        let f = self.ffn.forward(t, store, h)?;
        t.add(x, f)
    }
}

/// One IVT layer: cross-attention into images, then self-attention.
pub struct IvtLayer {
    pub sca: SpatialCrossAttention,
    pub sa: SelfAttentionBlock,
}

impl IvtLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_img: usize,
        c_q: usize,
        heads: usize,
        samples: usize,
        hidden: usize,
    ) -> Self {
        Self {
            sca: SpatialCrossAttention::new(store, rng, &format!("{name}.sca"), c_img, c_q, heads, samples),
            sa: SelfAttentionBlock::new(store, rng, &format!("{name}.sa"), c_q, heads, hidden),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        queries: Var,
        features: Var,
        proj: &VoxelProjection,
        pos: Option<Var>,
    ) -> Result<Var> {
        let q = self.sca.forward(t, store, queries, features, proj)?;
        self.sa.forward(t, store, q, pos)
    }
}
