//! Mask-classification decoder with one query set per semantic label group.
//!
//! Every group's queries run through the same decoder layers (3D deformable
//! cross-attention into `O_c`, query self-attention, feed-forward), then a
//! per-group class head and a shared mask embedding whose dot product with
//! `O` gives per-voxel mask logits. Only the finest group runs at inference.

mod groups;
mod hungarian;

pub use groups::{
    build_semantic_groups, relabel_for_group, GroupThresholds, LabelGroup, SemanticGroupSpec, BACKGROUND,
    EMPTY_LABEL, FOREGROUND, OTHERS,
};
pub use hungarian::{assignment_cost, hungarian_match};

use rand_chacha::ChaCha8Rng;

use crate::encoder::SelfAttentionBlock;
use crate::layers::{Conv, LayerNorm, Linear};
use crate::scene::EMPTY;
use crate::tensor::ops::DeformLayout;
use crate::tensor::{ConvSpec, Init, NdValue, ParamId, ParamStore, Result as TResult, Tape, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("label groups: {0}")]
    Groups(String),
    #[error("matching: {0}")]
    Matching(String),
    #[error("unknown category id {0}")]
    UnknownCategory(u16),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Matching-cost and loss weights of the mask-classification objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskClsWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// Class weight of the no-object target for unmatched queries.
    pub no_object: f64,
}

impl Default for MaskClsWeights {
    fn default() -> Self {
        Self { class: 2.0, bce: 5.0, dice: 5.0, no_object: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    /// Queries per group.
    pub queries: usize,
    /// Query width `C_m`.
    pub dim: usize,
    pub heads: usize,
    pub samples: usize,
    pub ffn_hidden: usize,
    pub weights: MaskClsWeights,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 3, queries: 20, dim: 32, heads: 8, samples: 4, ffn_hidden: 64, weights: MaskClsWeights::default() }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.queries == 0 || self.samples == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(DecoderError::Groups(format!(
                "decoder needs queries, samples > 0 and heads dividing dim (got {} heads, dim {})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Query cross-attention into a feature volume (3D deformable attention).
///
/// Each query has a learned reference point; per head and sample a linear
/// offset on the reference logit gives a normalised sample location.
pub struct VolumeCrossAttention {
    norm: LayerNorm,
    offsets: Linear,
    weights: Linear,
    out: Linear,
    /// `[3, H·R·3]` copies a reference point to every sample slot.
    expand: NdValue,
    pub heads: usize,
    pub samples: usize,
}

impl VolumeCrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, samples: usize) -> Self {
        let n = heads * samples * 3;
        let ow = store.add(format!("{name}.offsets.w"), &[dim, n], Init::Zeros, rng);
        // small ring of logit offsets per head, widening with the sample index
        let mut bias = vec![0.0; n];
        for h in 0..heads {
            let theta = std::f64::consts::TAU * h as f64 / heads as f64;
            for r in 0..samples {
                let rad = 0.1 * (r + 1) as f64;
                let s = (h * samples + r) * 3;
                bias[s] = rad * theta.cos();
                bias[s + 1] = rad * theta.sin();
                bias[s + 2] = if r % 2 == 0 { 0.5 * rad } else { -0.5 * rad };
            }
        }
        let ob = store.insert(format!("{name}.offsets.b"), NdValue::new([n], bias).expect("bias shape"));
        let expand = NdValue::from_fn([3, n], |i| if i / n == (i % n) % 3 { 1.0 } else { 0.0 });
        Self {
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), dim),
            offsets: Linear { w: ow, b: ob, d_in: dim, d_out: n },
            weights: Linear::new(store, rng, &format!("{name}.weights"), dim, heads * samples),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            expand,
            heads,
            samples,
        }
    }

    /// Normalised sample locations `[Nq, H·R·3]` in `(0, 1)`.
    pub fn locations(&self, t: &mut Tape, store: &ParamStore, q: Var, reference: Var) -> TResult<Var> {
        let e = t.constant(self.expand.clone());
        let base = t.matmul(reference, e)?;
        let off = self.offsets.forward(t, store, q)?;
        let logits = t.add(base, off)?;
        Ok(t.sigmoid(logits))
    }

    /// `queries[Nq, C]`, `reference[Nq, 3]` logits, `value[C, X, Y, Z]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, queries: Var, reference: Var, value: Var) -> TResult<Var> {
        let nq = t.shape(queries)[0];
        let q = self.norm.forward(t, store, queries)?;
        let loc = self.locations(t, store, q, reference)?;
        let wl = self.weights.forward(t, store, q)?;
        let wl = t.reshape(wl, &[nq * self.heads, self.samples])?;
        let w = t.softmax(wl, 1)?;
        let layout = DeformLayout { queries: nq, heads: self.heads, samples: self.samples };
        let att = t.deformable_attention_3d(value, loc, w, layout)?;
        let upd = self.out.forward(t, store, att)?;
        t.add(queries, upd)
    }
}

pub struct DecoderLayer {
    pub value_proj: Conv,
    pub cross: VolumeCrossAttention,
    pub interact: SelfAttentionBlock,
}

struct GroupParams {
    queries: ParamId,
    reference: ParamId,
    class_head: Linear,
}

/// Outputs of one group's query set after the last decoder layer.
pub struct GroupPrediction {
    pub group: usize,
    /// `[Nq, L + 1]`; the last column is no-object.
    pub class_logits: Var,
    /// `[Nq, X·Y·Z]`, sigmoid gives the mask.
    pub mask_logits: Var,
}

pub struct GroupDecoder {
    pub cfg: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    mask_l1: Linear,
    mask_l2: Linear,
    groups: Vec<GroupParams>,
    /// Labels per group, no-object excluded.
    pub group_labels: Vec<usize>,
}

impl GroupDecoder {
    /// `c_volume` is the channel count of `O_c` and `O`.
    pub fn new(
        cfg: &DecoderConfig,
        spec: &SemanticGroupSpec,
        c_volume: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer {
                value_proj: Conv::new(store, rng, &format!("decoder.l{l}.value"), c_volume, d, ConvSpec::pointwise()),
                cross: VolumeCrossAttention::new(store, rng, &format!("decoder.l{l}.cross"), d, cfg.heads, cfg.samples),
                interact: SelfAttentionBlock::new(store, rng, &format!("decoder.l{l}.sa"), d, cfg.heads, cfg.ffn_hidden),
            })
            .collect();
        let groups = spec
            .groups
            .iter()
            .enumerate()
            .map(|(g, grp)| GroupParams {
                queries: store.add(format!("decoder.g{g}.queries"), &[cfg.queries, d], Init::Uniform(1.0), rng),
                reference: store.add(format!("decoder.g{g}.reference"), &[cfg.queries, 3], Init::Uniform(2.0), rng),
                class_head: Linear::new(store, rng, &format!("decoder.g{g}.class"), d, grp.n_labels() + 1),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            norm: LayerNorm::new(store, rng, "decoder.norm", d),
            mask_l1: Linear::new(store, rng, "decoder.mask.l1", d, d),
            mask_l2: Linear::new(store, rng, "decoder.mask.l2", d, c_volume),
            groups,
            group_labels: spec.groups.iter().map(LabelGroup::n_labels).collect(),
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Parameters touched when only `groups` run.
    pub fn params_for(&self, groups: &[usize]) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for &g in groups {
            let p = &self.groups[g];
            ids.extend([p.queries, p.reference, p.class_head.w, p.class_head.b]);
        }
        ids
    }

    /// Runs the query sets of `groups` against `o_c[C, Xc, Yc, Zc]` and
    /// predicts masks over `o[C, X, Y, Z]`.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        o_c: Var,
        o: Var,
        groups: &[usize],
    ) -> Result<Vec<GroupPrediction>, DecoderError> {
        let values: Vec<Var> =
            self.layers.iter().map(|l| l.value_proj.forward(t, store, o_c)).collect::<TResult<_>>()?;
        let s = t.shape(o).to_vec();
        let o_flat = t.reshape(o, &[s[0], s[1..].iter().product()])?;
        let mut out = Vec::with_capacity(groups.len());
        for &g in groups {
            let p = self.groups.get(g).ok_or_else(|| DecoderError::Groups(format!("no group {g}")))?;
            let mut q = t.param(store, p.queries);
            let reference = t.param(store, p.reference);
            for (layer, &value) in self.layers.iter().zip(&values) {
                q = layer.cross.forward(t, store, q, reference, value)?;
                q = layer.interact.forward(t, store, q, None)?;
            }
            let q = self.norm.forward(t, store, q)?;
            let class_logits = p.class_head.forward(t, store, q)?;
            let e = self.mask_l1.forward(t, store, q)?;
            let e = t.relu(e);
            let e = self.mask_l2.forward(t, store, e)?;
            let mask_logits = predict_masks(t, e, o_flat)?;
            out.push(GroupPrediction { group: g, class_logits, mask_logits });
        }
        Ok(out)
    }
}

/// Mask logits `E[Nq, C] · O[C, V]`; the mask is their sigmoid.
pub fn predict_masks(t: &mut Tape, embeddings: Var, o_flat: Var) -> TResult<Var> {
    t.matmul(embeddings, o_flat)
}

/// One ground-truth segment per group label present, in label order.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    pub labels: Vec<u16>,
    /// Segment index per voxel.
    pub assignment: Vec<usize>,
    pub n_voxels: usize,
}

impl Segments {
    pub fn from_labels(group_labels: &[u16], n_labels: usize) -> Self {
        let mut present = vec![false; n_labels];
        for &l in group_labels {
            present[l as usize] = true;
        }
        let labels: Vec<u16> = (0..n_labels as u16).filter(|&l| present[l as usize]).collect();
        let mut slot = vec![usize::MAX; n_labels];
        for (i, &l) in labels.iter().enumerate() {
            slot[l as usize] = i;
        }
        Self { assignment: group_labels.iter().map(|&l| slot[l as usize]).collect(), labels, n_voxels: group_labels.len() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Dense `{0,1}` masks `[S, V]` ordered like `rows`.
    pub fn dense(&self, rows: &[usize]) -> Vec<f64> {
        let v = self.n_voxels;
        let mut out = vec![0.0; rows.len() * v];
        for (r, &s) in rows.iter().enumerate() {
            for (j, &a) in self.assignment.iter().enumerate() {
                if a == s {
                    out[r * v + j] = 1.0;
                }
            }
        }
        out
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (o, row) in out.chunks_mut(width).zip(logits.chunks(width)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for (o, x) in o.iter_mut().zip(row) {
            *o = (x - m).exp() / z;
        }
    }
    out
}

/// Matching cost `[Nq, S]`: `w_cls·(−p(label)) + w_bce·BCE + w_dice·Dice`,
/// with the same BCE mean and smoothed dice as the losses.
pub fn matching_cost(
    class_logits: &NdValue,
    mask_logits: &NdValue,
    segs: &Segments,
    weights: &MaskClsWeights,
    voxel_weights: Option<&[f64]>,
) -> Vec<f64> {
    let nq = class_logits.shape()[0];
    let width = class_logits.shape()[1];
    let v = segs.n_voxels;
    let s = segs.len();
    let probs = softmax_rows(class_logits.data(), width);
    let wsum = voxel_weights.map_or(v as f64, |w| w.iter().sum());
    let mut seg_mass = vec![0.0; s];
    for (j, &a) in segs.assignment.iter().enumerate() {
        seg_mass[a] += voxel_weights.map_or(1.0, |w| w[j]);
    }
    let md = mask_logits.data();
    let mut cost = vec![0.0; nq * s];
    let mut sx = vec![0.0; s];
    let mut sp = vec![0.0; s];
    for q in 0..nq {
        sx.iter_mut().for_each(|x| *x = 0.0);
        sp.iter_mut().for_each(|x| *x = 0.0);
        let (mut soft, mut psum) = (0.0, 0.0);
        for j in 0..v {
            let w = voxel_weights.map_or(1.0, |w| w[j]);
            let x = md[q * v + j];
            let p = sigmoid(x);
            soft += w * softplus(x);
            psum += w * p;
            let a = segs.assignment[j];
            sx[a] += w * x;
            sp[a] += w * p;
        }
        for k in 0..s {
            let bce = if wsum > 0.0 { (soft - sx[k]) / wsum } else { 0.0 };
            let dice = 1.0 - (2.0 * sp[k] + 1.0) / (psum + seg_mass[k] + 1.0);
            let pc = probs[q * width + segs.labels[k] as usize];
            cost[q * s + k] = -weights.class * pc + weights.bce * bce + weights.dice * dice;
        }
    }
    cost
}

/// Components of one group's mask-classification loss.
pub struct MaskClsLoss {
    pub total: Var,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

/// Matches queries to segments and returns the mask-classification loss.
pub fn mask_cls_loss(
    t: &mut Tape,
    pred: &GroupPrediction,
    segs: &Segments,
    weights: &MaskClsWeights,
    voxel_weights: Option<&[f64]>,
) -> Result<(MaskClsLoss, Vec<usize>), DecoderError> {
    let (nq, width) = (t.shape(pred.class_logits)[0], t.shape(pred.class_logits)[1]);
    let cost = matching_cost(t.value(pred.class_logits), t.value(pred.mask_logits), segs, weights, voxel_weights);
    let assignment = hungarian_match(&cost, nq, segs.len())?;
    let no_object = width - 1;
    let mut targets = vec![no_object; nq];
    for (k, &q) in assignment.iter().enumerate() {
        targets[q] = segs.labels[k] as usize;
    }
    let mut cw = vec![1.0; width];
    cw[no_object] = weights.no_object;
    let ce = t.cross_entropy(pred.class_logits, &targets, Some(&cw), None)?;
    let mut terms = vec![(weights.class, ce)];
    let (mut bce_v, mut dice_v) = (0.0, 0.0);
    if !segs.is_empty() {
        let rows = t.gather_rows(pred.mask_logits, &assignment)?;
        let dense = segs.dense(&(0..segs.len()).collect::<Vec<_>>());
        let bce = t.bce_with_logits_rows(rows, &dense, voxel_weights)?;
        let bce = t.mean_all(bce);
        let dice = t.dice_rows(rows, &dense, voxel_weights)?;
        let dice = t.mean_all(dice);
        bce_v = t.value(bce).item();
        dice_v = t.value(dice).item();
        terms.push((weights.bce, bce));
        terms.push((weights.dice, dice));
    }
    let class_v = t.value(ce).item();
    let total = t.linear_combination(&terms)?;
    Ok((MaskClsLoss { total, class: class_v, bce: bce_v, dice: dice_v }, assignment))
}

/// Sum of per-group mask-classification losses, in group order.
pub fn group_losses(
    t: &mut Tape,
    preds: &[GroupPrediction],
    group_labels: &[Vec<u16>],
    spec: &SemanticGroupSpec,
    weights: &MaskClsWeights,
    voxel_weights: Option<&[f64]>,
) -> Result<(Var, Vec<MaskClsLoss>), DecoderError> {
    let mut parts = Vec::with_capacity(preds.len());
    for p in preds {
        let segs = Segments::from_labels(&group_labels[p.group], spec.groups[p.group].n_labels());
        parts.push(mask_cls_loss(t, p, &segs, weights, voxel_weights)?.0);
    }
    let terms: Vec<(f64, Var)> = parts.iter().map(|p| (1.0, p.total)).collect();
    Ok((t.linear_combination(&terms)?, parts))
}

/// Per-voxel label from one group's predictions: the `(query, label)`
/// maximising `p_q(label)·m_q[v]` among queries whose most likely class is
/// not no-object. Ties keep the lowest query, then the lowest label. The
/// group's `empty` label, or no surviving query, gives `EMPTY`.
pub fn semantic_inference(class_logits: &NdValue, mask_logits: &NdValue, group: &LabelGroup) -> Vec<u16> {
    let nq = class_logits.shape()[0];
    let width = class_logits.shape()[1];
    let v = mask_logits.shape()[1];
    let l = width - 1;
    let probs = softmax_rows(class_logits.data(), width);
    let kept: Vec<usize> = (0..nq)
        .filter(|&q| {
            let row = &probs[q * width..(q + 1) * width];
            let best = (0..width).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best != l
        })
        .collect();
    let md = mask_logits.data();
    let empty = group.empty_label();
    (0..v)
        .map(|j| {
            let mut best = (f64::NEG_INFINITY, empty);
            for &q in &kept {
                let m = sigmoid(md[q * v + j]);
                for k in 0..l {
                    let s = probs[q * width + k] * m;
                    if s > best.0 {
                        best = (s, k as u16);
                    }
                }
            }
            if best.1 == empty { EMPTY } else { best.1 }
        })
        .collect()
}

/// Per-voxel classifier on `O` for the coarse segmentation loss.
pub struct SegHead {
    conv: Conv,
    pub classes: usize,
}

impl SegHead {
    /// `classes` includes `empty` as the last class.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c_volume: usize, classes: usize) -> Self {
        Self { conv: Conv::new(store, rng, "seg_head", c_volume, classes, ConvSpec::pointwise()), classes }
    }

    /// Logits `[V, classes]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, o: Var) -> TResult<Var> {
        let y = self.conv.forward(t, store, o)?;
        let s = t.shape(y).to_vec();
        let flat = t.reshape(y, &[s[0], s[1..].iter().product()])?;
        t.transpose(flat)
    }
}

/// Targets for the coarse classifier: original id, `empty` as the last
/// class, `ignore` where `visible` is false.
pub fn seg_targets(labels: &[u16], n_categories: usize, visible: Option<&[bool]>, ignore: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if visible.is_some_and(|m| !m[i]) {
                ignore
            } else if l == EMPTY {
                n_categories
            } else {
                l as usize
            }
        })
        .collect()
}

/// `(L_seg, L_depth)`: cross-entropy of the coarse classifier and of the
/// depth bins over hit pixels (`depth_ignore` marks pixels without a hit).
pub fn auxiliary_losses(
    t: &mut Tape,
    seg_logits: Var,
    seg_targets: &[usize],
    seg_ignore: usize,
    depth_logits: Var,
    depth_targets: &[usize],
    depth_ignore: usize,
) -> TResult<(Var, Var)> {
    let seg = t.cross_entropy(seg_logits, seg_targets, None, Some(seg_ignore))?;
    let depth = t.cross_entropy(depth_logits, depth_targets, None, Some(depth_ignore))?;
    Ok((seg, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CategoryTable;
    use rand::SeedableRng;

    #[test]
    fn zero_embedding_gives_half_masks() {
        let mut t = Tape::new();
        let e = t.constant(NdValue::zeros([2, 3]));
        let o = t.constant(NdValue::from_fn([3, 5], |i| i as f64));
        let m = predict_masks(&mut t, e, o).unwrap();
        assert!(t.value(m).data().iter().all(|&x| sigmoid(x) == 0.5));
    }

    #[test]
    fn aligned_embedding_closed_form() {
        let mut t = Tape::new();
        let col = [1.0, 3.0, 0.0];
        let e = t.constant(NdValue::new([1, 3], col.to_vec()).unwrap());
        let o = t.constant(NdValue::new([3, 1], col.to_vec()).unwrap());
        let m = predict_masks(&mut t, e, o).unwrap();
        assert!((sigmoid(t.value(m).data()[0]) - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn all_no_object_gives_empty_grid() {
        let table = CategoryTable::new([("a", true), ("b", false)]);
        let spec = SemanticGroupSpec::single(&table);
        let cls = NdValue::new([2, 4], vec![0.0, 0.0, 0.0, 9.0, 1.0, 0.0, 0.0, 5.0]).unwrap();
        let masks = NdValue::full([2, 6], 3.0);
        assert!(semantic_inference(&cls, &masks, spec.finest()).iter().all(|&l| l == EMPTY));
    }

    #[test]
    fn confident_query_labels_its_voxel() {
        let table = CategoryTable::new([("a", true), ("b", false)]);
        let spec = SemanticGroupSpec::single(&table);
        let cls = NdValue::new([1, 4], vec![0.0, 20.0, 0.0, 0.0]).unwrap();
        let masks = NdValue::new([1, 2], vec![30.0, -30.0]).unwrap();
        let out = semantic_inference(&cls, &masks, spec.finest());
        assert_eq!(out[0], 1);
    }

    #[test]
    fn segments_follow_label_order() {
        let s = Segments::from_labels(&[2, 0, 2, 2], 3);
        assert_eq!(s.labels, vec![0, 2]);
        assert_eq!(s.assignment, vec![1, 0, 1, 1]);
        assert_eq!(s.dense(&[1]), vec![1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn matching_cost_matches_loss_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let segs = Segments::from_labels(&[0, 1, 1, 2, 0, 2], 3);
        let cls = crate::layers::uniform_value(&[4, 4], 1.0, &mut rng);
        let masks = crate::layers::uniform_value(&[4, 6], 2.0, &mut rng);
        let w = MaskClsWeights::default();
        let cost = matching_cost(&cls, &masks, &segs, &w, None);
        let mut t = Tape::new();
        let m = t.constant(masks.clone());
        for q in 0..4 {
            for k in 0..3 {
                let row = t.gather_rows(m, &[q]).unwrap();
                let dense = segs.dense(&[k]);
                let b = t.bce_with_logits_rows(row, &dense, None).unwrap();
                let d = t.dice_rows(row, &dense, None).unwrap();
                let p = softmax_rows(cls.data(), 4)[q * 4 + segs.labels[k] as usize];
                let want = -2.0 * p + 5.0 * t.value(b).item() + 5.0 * t.value(d).item();
                assert!((cost[q * 3 + k] - want).abs() < 1e-12);
            }
        }
    }
}
