//! The assembled network: encoder, coarse segmentation head and group
//! decoder over one parameter store, plus per-scene training targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PipelineError, RunConfig, Scene};
use crate::decoder::{
    auxiliary_losses, build_semantic_groups, group_losses, relabel_for_group, seg_targets, semantic_inference,
    GroupDecoder, SegHead, SemanticGroupSpec,
};
use crate::encoder::{depth_targets, images_to_value, Encoder, EncoderGeometry};
use crate::scene::{CameraRig, CategoryTable, SemanticVoxelGrid};
use crate::tensor::{NdValue, OpStats, ParamStore, Tape, Var};

/// Label groups for a dataset; `K = 1` trains the original labels only.
pub fn build_groups(cfg: &RunConfig, histogram: &[u64], table: &CategoryTable) -> Result<SemanticGroupSpec, PipelineError> {
    if cfg.groups == 1 {
        return Ok(SemanticGroupSpec::single(table));
    }
    let explicit = !(cfg.thresholds.foreground.is_empty() && cfg.thresholds.background.is_empty());
    let thresholds = explicit.then(|| cfg.thresholds.clone());
    Ok(build_semantic_groups(histogram, table, cfg.groups, thresholds)?)
}

/// Everything a training step needs from one scene.
pub struct Prepared {
    pub images: NdValue,
    pub depth_targets: Vec<usize>,
    pub labels: Vec<u16>,
    pub group_labels: Vec<Vec<u16>>,
    pub seg_targets: Vec<usize>,
    /// 1 on visible voxels, 0 elsewhere, when the loss is visibility-masked.
    pub voxel_weights: Option<Vec<f64>>,
}

/// Scalar loss components of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub depth: f64,
    pub seg: f64,
    pub mask_cls: f64,
    /// Mask-classification loss per group, coarse to fine.
    pub groups: Vec<f64>,
}

pub struct Model {
    pub cfg: RunConfig,
    pub encoder: Encoder,
    pub seg_head: SegHead,
    pub decoder: GroupDecoder,
    pub groups: SemanticGroupSpec,
    pub store: ParamStore,
    pub geometry: EncoderGeometry,
}

impl Model {
    /// Fresh parameters drawn from `train.seed`.
    pub fn new(cfg: &RunConfig, rig: &CameraRig, groups: SemanticGroupSpec) -> Result<Self, PipelineError> {
        cfg.validate()?;
        groups.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut store = ParamStore::new();
        let mut encoder = Encoder::new(&cfg.encoder, cfg.grid.dims, &mut store, &mut rng)?;
        encoder.ivt_enabled = cfg.ivt_enabled;
        let q = cfg.encoder.query_dim;
        let seg_head = SegHead::new(&mut store, &mut rng, q, groups.categories.len() + 1);
        let decoder = GroupDecoder::new(&cfg.decoder, &groups, q, &mut store, &mut rng)?;
        let geometry = EncoderGeometry::new(&cfg.encoder, &cfg.grid, rig)?;
        Ok(Self { cfg: cfg.clone(), encoder, seg_head, decoder, groups, store, geometry })
    }

    pub fn for_dataset(cfg: &RunConfig, data: &Dataset) -> Result<Self, PipelineError> {
        let groups = build_groups(cfg, &data.histogram(), data.categories())?;
        Self::new(cfg, &data.rig, groups)
    }

    pub fn n_categories(&self) -> usize {
        self.groups.categories.len()
    }

    pub fn seg_ignore(&self) -> usize {
        self.n_categories() + 1
    }

    pub fn prepare(&self, scene: &Scene) -> Result<Prepared, PipelineError> {
        let labels = scene.grid.labels().to_vec();
        let group_labels =
            self.groups.groups.iter().map(|g| relabel_for_group(&labels, g)).collect::<Result<Vec<_>, _>>()?;
        let masked = self.cfg.loss.visible_mask;
        let visible = masked.then_some(scene.visible.as_slice());
        Ok(Prepared {
            images: images_to_value(&scene.views)?,
            depth_targets: depth_targets(&scene.views, &self.cfg.encoder.depth, self.cfg.encoder.feature_stride()),
            seg_targets: seg_targets(&labels, self.n_categories(), visible, self.seg_ignore()),
            labels,
            group_labels,
            voxel_weights: masked.then(|| scene.visible.iter().map(|&v| v as u8 as f64).collect()),
        })
    }

    /// Total loss `λ_d·L_depth + λ_s·L_seg + λ_m·Σ_g L_g` on a training tape.
    pub fn loss(&self, t: &mut Tape, p: &Prepared) -> Result<(Var, LossBreakdown), PipelineError> {
        let out = self.encoder.forward(t, &self.store, &p.images, &self.geometry)?;
        let seg_logits = self.seg_head.forward(t, &self.store, out.full)?;
        let (seg, depth) = auxiliary_losses(
            t,
            seg_logits,
            &p.seg_targets,
            self.seg_ignore(),
            out.depth_logits,
            &p.depth_targets,
            self.cfg.encoder.depth.count,
        )?;
        let all: Vec<usize> = (0..self.groups.k()).collect();
        let preds = self.decoder.forward(t, &self.store, out.compact, out.full, &all)?;
        let weights = self.cfg.mask_weights();
        let (mask, parts) =
            group_losses(t, &preds, &p.group_labels, &self.groups, &weights, p.voxel_weights.as_deref())?;
        let w = &self.cfg.loss;
        let total = t.linear_combination(&[(w.depth, depth), (w.seg, seg), (w.mask_cls, mask)])?;
        let b = LossBreakdown {
            total: t.value(total).item(),
            depth: t.value(depth).item(),
            seg: t.value(seg).item(),
            mask_cls: t.value(mask).item(),
            groups: parts.iter().map(|g| t.value(g.total).item()).collect(),
        };
        Ok((total, b))
    }

    /// Labels from the finest group only, on an inference tape. Returns the
    /// per-op multiply-add counts alongside.
    pub fn predict_labels(&self, images: &NdValue) -> Result<(Vec<u16>, OpStats), PipelineError> {
        let mut t = Tape::inference();
        let out = self.encoder.forward(&mut t, &self.store, images, &self.geometry)?;
        let finest = self.groups.k() - 1;
        let preds = self.decoder.forward(&mut t, &self.store, out.compact, out.full, &[finest])?;
        let labels =
            semantic_inference(t.value(preds[0].class_logits), t.value(preds[0].mask_logits), self.groups.finest());
        Ok((labels, t.stats().clone()))
    }

    pub fn predict(&self, scene: &Scene) -> Result<SemanticVoxelGrid, PipelineError> {
        let (labels, _) = self.predict_labels(&images_to_value(&scene.views)?)?;
        Ok(SemanticVoxelGrid::from_labels(scene.grid.spec, scene.grid.categories.clone(), labels)?)
    }
}
