//! Multi-scale 3D encoder, fusion to the compact volume, and U-Net upsampling.

use rand_chacha::ChaCha8Rng;

use crate::layers::{Conv, ConvTranspose};
use crate::tensor::{ConvSpec, NdValue, ParamStore, Result, Tape, TensorError, Var};

fn vol_dims(t: &Tape, v: Var) -> [usize; 3] {
    let s = t.shape(v);
    [s[1], s[2], s[3]]
}

/// Normalised sample coordinate of target cell `k` of `n_out` on a source
/// axis with `n_in` nodes, matching cell centres in the shared metric frame.
fn resample_coord(k: usize, n_out: usize, n_in: usize) -> f64 {
    if n_in == 1 {
        return 0.0;
    }
    let idx = (k as f64 + 0.5) / n_out as f64 * n_in as f64 - 0.5;
    (idx / (n_in - 1) as f64).clamp(0.0, 1.0)
}

/// Trilinear resampling of `vol[C,...]` onto `dims` (identity when equal).
pub fn resample_to(t: &mut Tape, vol: Var, dims: [usize; 3]) -> Result<Var> {
    let src = vol_dims(t, vol);
    if src == dims {
        return Ok(vol);
    }
    let n: usize = dims.iter().product();
    let mut pts = Vec::with_capacity(n * 3);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                pts.push(resample_coord(x, dims[0], src[0]));
                pts.push(resample_coord(y, dims[1], src[1]));
                pts.push(resample_coord(z, dims[2], src[2]));
            }
        }
    }
    let pts = t.constant(NdValue::new([n, 3], pts)?);
    let (s, _) = t.trilinear_sample(vol, pts)?;
    let c = t.shape(vol)[0];
    t.reshape(s, &[c, dims[0], dims[1], dims[2]])
}

/// `relu(x + conv(relu(conv(x))))` with 3³ same convolutions.
pub struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            c1: Conv::new(store, rng, &format!("{name}.c1"), c, c, ConvSpec::same(3)),
            c2: Conv::new(store, rng, &format!("{name}.c2"), c, c, ConvSpec::same(3)),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.c1.forward(t, store, x)?;
        let h = t.relu(h);
        let h = self.c2.forward(t, store, h)?;
        let s = t.add(x, h)?;
        Ok(t.relu(s))
    }
}

/// Three levels; each stride-2 step halves every axis and doubles channels.
pub struct MultiScaleEncoder {
    levels: Vec<Vec<ResBlock>>,
    downs: Vec<Conv>,
}

pub const PYRAMID_LEVELS: usize = 3;

impl MultiScaleEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c0: usize, blocks: usize) -> Self {
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        for l in 0..PYRAMID_LEVELS {
            let c = c0 << l;
            if l > 0 {
                downs.push(Conv::new(store, rng, &format!("encoder3d.down{l}"), c / 2, c, ConvSpec::cube(3, 2, 1)));
            }
            levels.push((0..blocks).map(|b| ResBlock::new(store, rng, &format!("encoder3d.l{l}.b{b}"), c)).collect());
        }
        Self { levels, downs }
    }

    /// Pyramid `{O_E⁰, O_E¹, O_E²}`; every axis must be divisible by 4.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, o_e: Var) -> Result<Vec<Var>> {
        let dims = vol_dims(t, o_e);
        let f = 1 << (PYRAMID_LEVELS - 1);
        if dims.iter().any(|d| d % f != 0) {
            return Err(TensorError::shape("encode_multiscale", format!("{dims:?} not divisible by {f}")));
        }
        let mut out = Vec::with_capacity(PYRAMID_LEVELS);
        let mut x = o_e;
        for (l, blocks) in self.levels.iter().enumerate() {
            if l > 0 {
                let y = self.downs[l - 1].forward(t, store, x)?;
                x = t.relu(y);
            }
            for b in blocks {
                x = b.forward(t, store, x)?;
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// Resample every level to the compact dims, concatenate, project to `C_Q`.
pub struct CompactFuser {
    proj: Conv,
}

impl CompactFuser {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c0: usize, c_q: usize) -> Self {
        let total: usize = (0..PYRAMID_LEVELS).map(|l| c0 << l).sum();
        Self { proj: Conv::new(store, rng, "fuse.proj", total, c_q, ConvSpec::pointwise()) }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, pyramid: &[Var], compact: [usize; 3]) -> Result<Var> {
        let parts = pyramid
            .iter()
            .map(|&v| resample_to(t, v, compact))
            .collect::<Result<Vec<_>>>()?;
        let cat = t.concat(&parts, 0)?;
        self.proj.forward(t, store, cat)
    }
}

/// Per-stage strides that undo `ratio` with factors of 2.
pub fn upsample_strides(ratio: [usize; 3]) -> Option<Vec<[usize; 3]>> {
    if ratio.iter().any(|&r| r == 0 || !r.is_power_of_two()) {
        return None;
    }
    let n = ratio.iter().map(|r| r.trailing_zeros()).max().unwrap_or(0);
    Some(
        (0..n)
            .map(|s| ratio.map(|r| if r.trailing_zeros() > s { 2 } else { 1 }))
            .collect(),
    )
}

struct UpStage {
    up: ConvTranspose,
    merge: Conv,
    skip_level: usize,
}

/// Transposed-conv stages from `O_c` back to full dims, each concatenating
/// the pyramid level of matching resolution.
pub struct Upsampler {
    stages: Vec<UpStage>,
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c0: usize, c_q: usize, ratio: [usize; 3]) -> Option<Self> {
        let strides = upsample_strides(ratio)?;
        let n = strides.len();
        let stages = strides
            .iter()
            .enumerate()
            .map(|(s, &st)| {
                let skip_level = (n - 1 - s).min(PYRAMID_LEVELS - 1);
                let spec = ConvSpec::anisotropic(st, st, [0; 3]);
                UpStage {
                    up: ConvTranspose::new(store, rng, &format!("upsample.s{s}.up"), c_q, c_q, spec),
                    merge: Conv::new(
                        store,
                        rng,
                        &format!("upsample.s{s}.merge"),
                        c_q + (c0 << skip_level),
                        c_q,
                        ConvSpec::pointwise(),
                    ),
                    skip_level,
                }
            })
            .collect();
        Some(Self { stages })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, o_c: Var, pyramid: &[Var]) -> Result<Var> {
        let mut x = o_c;
        let last = self.stages.len().saturating_sub(1);
        for (s, st) in self.stages.iter().enumerate() {
            let up = st.up.forward(t, store, x)?;
            let dims = vol_dims(t, up);
            let skip = resample_to(t, pyramid[st.skip_level], dims)?;
            let cat = t.concat(&[up, skip], 0)?;
            let y = st.merge.forward(t, store, cat)?;
            x = if s == last { y } else { t.relu(y) };
        }
        Ok(x)
    }
}
