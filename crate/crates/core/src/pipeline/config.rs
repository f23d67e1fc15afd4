//! Run configuration as a flat `section.key = value` document.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::decoder::{DecoderConfig, GroupThresholds, MaskClsWeights};
use crate::encoder::{DepthBins, EncoderConfig};
use crate::scene::{ClassDistributionSpec, GridSpec, RigSpec};
use crate::tensor::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub depth: f64,
    pub seg: f64,
    pub mask_cls: f64,
    /// Restrict the seg / mask losses to voxels seen by the rig.
    pub visible_mask: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { depth: 1.0, seg: 10.0, mask_cls: 1.0, visible_mask: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Parameter initialisation seed.
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, steps: 200, batch: 1, log_every: 10, checkpoint_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub long_tail_exponent: f64,
    pub object_fraction: f64,
    pub grid: GridSpec,
    pub rig: RigSpec,
    pub encoder: EncoderConfig,
    pub ivt_enabled: bool,
    pub decoder: DecoderConfig,
    /// Number of label groups; 1 trains the original labels only.
    pub groups: usize,
    /// Explicit middle-group boundaries; empty lists mean quantile split.
    pub thresholds: GroupThresholds,
    pub loss: LossWeights,
    pub optim: AdamW,
    pub clip_norm: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rig = RigSpec::default();
        let encoder = EncoderConfig { image_size: [rig.height, rig.width], ..EncoderConfig::default() };
        Self {
            seed: 0,
            scenes: 1,
            long_tail_exponent: 1.0,
            object_fraction: 0.08,
            grid: GridSpec::desk(),
            rig,
            encoder,
            ivt_enabled: true,
            decoder: DecoderConfig::default(),
            groups: 4,
            thresholds: GroupThresholds::default(),
            loss: LossWeights::default(),
            optim: AdamW::default(),
            clip_norm: 5.0,
            train: TrainConfig::default(),
        }
    }
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, PipelineError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| PipelineError::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn parse_array<T: std::str::FromStr + Copy + Default, const N: usize>(key: &str, v: &str) -> Result<[T; N], PipelineError> {
    let items: Vec<T> = parse_list(key, v)?;
    if items.len() != N {
        return Err(PipelineError::Config(format!("{key}: expected {N} values, got {}", items.len())));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&items);
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.trim().parse().map_err(|_| PipelineError::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn scene_spec(&self) -> ClassDistributionSpec {
        ClassDistributionSpec {
            object_fraction: self.object_fraction,
            ..ClassDistributionSpec::default_long_tail(self.long_tail_exponent)
        }
    }

    /// Every key with its current value, in document order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let d = &self.decoder;
        vec![
            ("seed", self.seed.to_string()),
            ("scene.count", self.scenes.to_string()),
            ("scene.long_tail_exponent", format!("{:?}", self.long_tail_exponent)),
            ("scene.object_fraction", format!("{:?}", self.object_fraction)),
            ("grid.dims", join(&self.grid.dims)),
            ("grid.voxel_size", format!("{:?}", self.grid.voxel_size)),
            ("grid.origin", join(&self.grid.origin)),
            ("rig.cameras", self.rig.n_cameras.to_string()),
            ("rig.width", self.rig.width.to_string()),
            ("rig.height", self.rig.height.to_string()),
            ("rig.focal", format!("{:?}", self.rig.focal)),
            ("rig.mount_height", format!("{:?}", self.rig.mount_height)),
            ("rig.yaw_jitter_deg", format!("{:?}", self.rig.yaw_jitter_deg)),
            ("model.feature_channels", e.feature_channels.to_string()),
            ("model.featurizer_hidden", e.featurizer_hidden.to_string()),
            ("model.featurizer_strides", e.featurizer_strides.to_string()),
            ("model.depth_bins", e.depth.count.to_string()),
            ("model.depth_min", format!("{:?}", e.depth.min)),
            ("model.depth_max", format!("{:?}", e.depth.max)),
            ("model.res_blocks", e.res_blocks.to_string()),
            ("model.compact_ratio", join(&e.compact_ratio)),
            ("model.query_dim", e.query_dim.to_string()),
            ("model.heads", e.heads.to_string()),
            ("model.samples", e.samples.to_string()),
            ("model.ivt_layers", e.ivt_layers.to_string()),
            ("model.ivt", self.ivt_enabled.to_string()),
            ("model.ffn_hidden", e.ffn_hidden.to_string()),
            ("decoder.layers", d.layers.to_string()),
            ("decoder.queries", d.queries.to_string()),
            ("decoder.dim", d.dim.to_string()),
            ("decoder.heads", d.heads.to_string()),
            ("decoder.samples", d.samples.to_string()),
            ("decoder.ffn_hidden", d.ffn_hidden.to_string()),
            ("groups.k", self.groups.to_string()),
            ("groups.foreground_thresholds", join(&self.thresholds.foreground)),
            ("groups.background_thresholds", join(&self.thresholds.background)),
            ("loss.depth", format!("{:?}", self.loss.depth)),
            ("loss.seg", format!("{:?}", self.loss.seg)),
            ("loss.mask_cls", format!("{:?}", self.loss.mask_cls)),
            ("loss.class", format!("{:?}", d.weights.class)),
            ("loss.bce", format!("{:?}", d.weights.bce)),
            ("loss.dice", format!("{:?}", d.weights.dice)),
            ("loss.no_object", format!("{:?}", d.weights.no_object)),
            ("loss.visible_mask", self.loss.visible_mask.to_string()),
            ("optim.lr", format!("{:?}", self.optim.lr)),
            ("optim.weight_decay", format!("{:?}", self.optim.weight_decay)),
            ("optim.beta1", format!("{:?}", self.optim.beta1)),
            ("optim.beta2", format!("{:?}", self.optim.beta2)),
            ("optim.eps", format!("{:?}", self.optim.eps)),
            ("optim.clip_norm", format!("{:?}", self.clip_norm)),
            ("train.seed", self.train.seed.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.log_every", self.train.log_every.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse(k, v)?,
            "scene.count" => self.scenes = parse(k, v)?,
            "scene.long_tail_exponent" => self.long_tail_exponent = parse(k, v)?,
            "scene.object_fraction" => self.object_fraction = parse(k, v)?,
            "grid.dims" => self.grid.dims = parse_array(k, v)?,
            "grid.voxel_size" => self.grid.voxel_size = parse(k, v)?,
            "grid.origin" => self.grid.origin = parse_array(k, v)?,
            "rig.cameras" => self.rig.n_cameras = parse(k, v)?,
            "rig.width" => self.rig.width = parse(k, v)?,
            "rig.height" => self.rig.height = parse(k, v)?,
            "rig.focal" => self.rig.focal = parse(k, v)?,
            "rig.mount_height" => self.rig.mount_height = parse(k, v)?,
            "rig.yaw_jitter_deg" => self.rig.yaw_jitter_deg = parse(k, v)?,
            "model.feature_channels" => self.encoder.feature_channels = parse(k, v)?,
            "model.featurizer_hidden" => self.encoder.featurizer_hidden = parse(k, v)?,
            "model.featurizer_strides" => self.encoder.featurizer_strides = parse(k, v)?,
            "model.depth_bins" => self.encoder.depth.count = parse(k, v)?,
            "model.depth_min" => self.encoder.depth.min = parse(k, v)?,
            "model.depth_max" => self.encoder.depth.max = parse(k, v)?,
            "model.res_blocks" => self.encoder.res_blocks = parse(k, v)?,
            "model.compact_ratio" => self.encoder.compact_ratio = parse_array(k, v)?,
            "model.query_dim" => self.encoder.query_dim = parse(k, v)?,
            "model.heads" => self.encoder.heads = parse(k, v)?,
            "model.samples" => self.encoder.samples = parse(k, v)?,
            "model.ivt_layers" => self.encoder.ivt_layers = parse(k, v)?,
            "model.ivt" => self.ivt_enabled = parse(k, v)?,
            "model.ffn_hidden" => self.encoder.ffn_hidden = parse(k, v)?,
            "decoder.layers" => self.decoder.layers = parse(k, v)?,
            "decoder.queries" => self.decoder.queries = parse(k, v)?,
            "decoder.dim" => self.decoder.dim = parse(k, v)?,
            "decoder.heads" => self.decoder.heads = parse(k, v)?,
            "decoder.samples" => self.decoder.samples = parse(k, v)?,
            "decoder.ffn_hidden" => self.decoder.ffn_hidden = parse(k, v)?,
            "groups.k" => self.groups = parse(k, v)?,
            "groups.foreground_thresholds" => self.thresholds.foreground = parse_list(k, v)?,
            "groups.background_thresholds" => self.thresholds.background = parse_list(k, v)?,
            "loss.depth" => self.loss.depth = parse(k, v)?,
            "loss.seg" => self.loss.seg = parse(k, v)?,
            "loss.mask_cls" => self.loss.mask_cls = parse(k, v)?,
            "loss.class" => self.decoder.weights.class = parse(k, v)?,
            "loss.bce" => self.decoder.weights.bce = parse(k, v)?,
            "loss.dice" => self.decoder.weights.dice = parse(k, v)?,
            "loss.no_object" => self.decoder.weights.no_object = parse(k, v)?,
            "loss.visible_mask" => self.loss.visible_mask = parse(k, v)?,
            "optim.lr" => self.optim.lr = parse(k, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(k, v)?,
            "optim.beta1" => self.optim.beta1 = parse(k, v)?,
            "optim.beta2" => self.optim.beta2 = parse(k, v)?,
            "optim.eps" => self.optim.eps = parse(k, v)?,
            "optim.clip_norm" => self.clip_norm = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.steps" => self.train.steps = parse(k, v)?,
            "train.batch" => self.train.batch = parse(k, v)?,
            "train.log_every" => self.train.log_every = parse(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            _ => return Err(PipelineError::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), PipelineError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| PipelineError::Config(format!("expected key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Starts from the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.grid.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if [self.rig.height, self.rig.width] != self.encoder.image_size {
            return bad(format!(
                "rig image {}x{} does not match encoder {:?}",
                self.rig.height, self.rig.width, self.encoder.image_size
            ));
        }
        self.encoder.validate(self.grid.dims).map_err(|e| PipelineError::Config(e.to_string()))?;
        self.decoder.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.decoder.dim != self.encoder.query_dim {
            return bad("decoder.dim must equal model.query_dim".into());
        }
        if self.groups == 0 {
            return bad("groups.k must be at least 1".into());
        }
        if self.scenes == 0 || self.train.batch == 0 {
            return bad("scene.count and train.batch must be positive".into());
        }
        if !(self.clip_norm > 0.0) || !(self.optim.lr > 0.0) {
            return bad("optim.lr and optim.clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn depth_bins(&self) -> DepthBins {
        self.encoder.depth
    }

    pub fn mask_weights(&self) -> MaskClsWeights {
        self.decoder.weights
    }

    fn hash_of(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if prefixes.iter().any(|p| k == *p || k.starts_with(&format!("{p}."))) {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hex SHA-256 over the keys that determine the generated data.
    pub fn data_hash(&self) -> String {
        self.hash_of(&["seed", "scene", "grid", "rig"])
    }

    /// Hex SHA-256 over every key that shapes the model or its data.
    pub fn model_hash(&self) -> String {
        self.hash_of(&["seed", "scene", "grid", "rig", "model", "decoder", "groups"])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.set("groups.k", "6").unwrap();
        cfg.set("groups.foreground_thresholds", "10,20.5").unwrap();
        let back = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model_hash(), cfg.model_hash());
        let mut other = cfg.clone();
        other.set("optim.lr", "0.01").unwrap();
        assert_eq!(other.model_hash(), cfg.model_hash());
        other.set("decoder.queries", "10").unwrap();
        assert_ne!(other.model_hash(), cfg.model_hash());
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(matches!(RunConfig::from_kv("optim.learning_rate = 1"), Err(PipelineError::Config(_))));
        assert!(RunConfig::default().apply_override("grid.dims=1,2").is_err());
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.encoder.compact_ratio, [4, 4, 1]);
        assert_eq!((c.encoder.heads, c.encoder.samples, c.decoder.samples), (8, 4, 4));
        assert_eq!((c.loss.depth, c.loss.seg, c.loss.mask_cls), (1.0, 10.0, 1.0));
        assert_eq!(c.optim.lr, 2e-4);
        c.validate().unwrap();
    }
}
