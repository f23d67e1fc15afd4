//! Tiny strided image encoder with a depth-distribution head.

use rand_chacha::ChaCha8Rng;

use super::lift::DepthBins;
use crate::layers::Conv;
use crate::scene::RenderedView;
use crate::tensor::{ConvSpec, NdValue, ParamStore, Result, Tape, Var};

/// Camera images stacked as `[3, Ncam, H, W]`.
pub fn images_to_value(views: &[RenderedView]) -> Result<NdValue> {
    let (w, h) = (views[0].width, views[0].height);
    let n = views.len();
    let plane = w * h;
    let mut data = vec![0.0; 3 * n * plane];
    for (cam, v) in views.iter().enumerate() {
        for c in 0..3 {
            let dst = (c * n + cam) * plane;
            for (o, &x) in data[dst..dst + plane].iter_mut().zip(&v.rgb[c * plane..(c + 1) * plane]) {
                *o = x as f64;
            }
        }
    }
    NdValue::new([3, n, h, w], data)
}

/// Ground-truth depth bin per feature pixel, rows ordered `(camera, i, j)`.
///
/// A feature pixel takes the nearest finite depth of its `stride × stride`
/// patch; patches with no hit get `bins.count` (ignored by the loss).
pub fn depth_targets(views: &[RenderedView], bins: &DepthBins, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for v in views {
        let (hf, wf) = (v.height / stride, v.width / stride);
        for i in 0..hf {
            for j in 0..wf {
                let mut best = f32::INFINITY;
                for a in 0..stride {
                    for b in 0..stride {
                        best = best.min(v.depth[(i * stride + a) * v.width + j * stride + b]);
                    }
                }
                out.push(if best.is_finite() { bins.bin_of(best as f64) } else { bins.count });
            }
        }
    }
    out
}

pub struct FeaturizerOutput {
    /// `[C_F, Ncam, Hf, Wf]`.
    pub features: Var,
    /// `[Ncam·Hf·Wf, B]` bin logits in `(camera, i, j)` row order.
    pub depth_logits: Var,
    /// `[B, Ncam, Hf, Wf]`, softmax over bins.
    pub depth: Var,
}

pub struct ImageFeaturizer {
    convs: Vec<Conv>,
    feature_head: Conv,
    depth_head: Conv,
}

impl ImageFeaturizer {
    /// `strided` stride-2 stages followed by one same-size stage.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        hidden: usize,
        out_channels: usize,
        depth_bins: usize,
        strided: usize,
    ) -> Self {
        let down = ConvSpec::anisotropic([1, 3, 3], [1, 2, 2], [0, 1, 1]);
        let same = ConvSpec::anisotropic([1, 3, 3], [1, 1, 1], [0, 1, 1]);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for s in 0..strided {
            convs.push(Conv::new(store, rng, &format!("featurizer.down{s}"), c_in, hidden, down));
            c_in = hidden;
        }
        convs.push(Conv::new(store, rng, "featurizer.mid", c_in, hidden, same));
        Self {
            convs,
            feature_head: Conv::new(store, rng, "featurizer.feature_head", hidden, out_channels, ConvSpec::pointwise()),
            depth_head: Conv::new(store, rng, "featurizer.depth_head", hidden, depth_bins, ConvSpec::pointwise()),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, images: Var) -> Result<FeaturizerOutput> {
        let mut x = images;
        for c in &self.convs {
            let y = c.forward(t, store, x)?;
            x = t.relu(y);
        }
        let features = self.feature_head.forward(t, store, x)?;
        let logits = self.depth_head.forward(t, store, x)?;
        let depth = t.softmax(logits, 0)?;
        let s = t.shape(logits).to_vec();
        let flat = t.reshape(logits, &[s[0], s[1] * s[2] * s[3]])?;
        let depth_logits = t.transpose(flat)?;
        Ok(FeaturizerOutput { features, depth_logits, depth })
    }
}
