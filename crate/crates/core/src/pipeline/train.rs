//! Ordered training loop: forward, backward, gradient averaging over the
//! batch, global-norm clipping and one AdamW update per step.

use super::{Checkpoint, Dataset, LossBreakdown, Model, PipelineError, Prepared, RunConfig};
use crate::decoder::SemanticGroupSpec;
use crate::tensor::{clip_grad_norm, OptimizerState, Tape};

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLog {
    /// Floats use `{:?}` so the log is bit-exact.
    pub fn line(&self) -> String {
        let l = &self.loss;
        let groups: Vec<String> = l.groups.iter().map(|g| format!("{g:?}")).collect();
        format!(
            "step={} total={:?} depth={:?} seg={:?} mask_cls={:?} groups={} grad_norm={:?}",
            self.step,
            l.total,
            l.depth,
            l.seg,
            l.mask_cls,
            groups.join(","),
            self.grad_norm
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let get = |key: &str| {
            line.split_whitespace().find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('='))).map(str::to_string)
        };
        let step = get("step")?.parse().ok()?;
        let f = |s: Option<String>| s.and_then(|v| v.parse::<f64>().ok());
        let loss = LossBreakdown {
            total: f(get("total"))?,
            depth: f(get("depth"))?,
            seg: f(get("seg"))?,
            mask_cls: f(get("mask_cls"))?,
            groups: get("groups")?.split(',').filter(|s| !s.is_empty()).map(|s| s.parse().ok()).collect::<Option<_>>()?,
        };
        Some(Self { step, loss, grad_norm: f(get("grad_norm"))? })
    }
}

pub struct Trainer {
    pub model: Model,
    pub state: OptimizerState,
    /// Completed steps.
    pub step: u64,
    pub prepared: Vec<Prepared>,
}

impl Trainer {
    pub fn new(model: Model, data: &Dataset) -> Result<Self, PipelineError> {
        let prepared = data.scenes.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>, _>>()?;
        let state = OptimizerState::new(&model.store);
        Ok(Self { model, state, step: 0, prepared })
    }

    pub fn fresh(cfg: &RunConfig, data: &Dataset) -> Result<Self, PipelineError> {
        Self::new(Model::for_dataset(cfg, data)?, data)
    }

    /// Rebuilds the model from a checkpoint's groups and restores parameters,
    /// moments and the step counter.
    pub fn resume(cfg: &RunConfig, data: &Dataset, ckpt: &Checkpoint) -> Result<Self, PipelineError> {
        if !ckpt.matches(&cfg.model_hash()) {
            return Err(PipelineError::Mismatch(format!(
                "checkpoint config hash {} differs from {}",
                ckpt.hash_hex(),
                cfg.model_hash()
            )));
        }
        let groups = SemanticGroupSpec::from_kv(&ckpt.groups)?;
        let mut t = Self::new(Model::new(cfg, &data.rig, groups)?, data)?;
        ckpt.restore(&mut t.model, &mut t.state)?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, PipelineError> {
        Checkpoint::capture(&self.model, &self.state, self.step)
    }

    /// Scenes used by step `step` (0-based), cycling through the dataset.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let b = self.model.cfg.train.batch;
        let n = self.prepared.len();
        (0..b).map(|j| (step as usize * b + j) % n).collect()
    }

    /// One optimisation step. A non-finite loss or gradient aborts before
    /// any parameter changes.
    pub fn step(&mut self) -> Result<StepLog, PipelineError> {
        let next = self.step + 1;
        let idx = self.batch_indices(self.step);
        let scale = 1.0 / idx.len() as f64;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut mean: Option<LossBreakdown> = None;
        for &i in &idx {
            let mut t = Tape::new();
            let (total, b) = self.model.loss(&mut t, &self.prepared[i])?;
            if !b.total.is_finite() {
                return Err(PipelineError::NonFinite { step: next, detail: format!("{b:?}") });
            }
            let g = t.backward(total)?.for_store(&self.model.store);
            if grads.is_empty() {
                grads = g.into_iter().map(|v| v.into_iter().map(|x| x * scale).collect()).collect();
            } else {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, x)| *a += x * scale);
                }
            }
            mean = Some(match mean {
                None => scaled(&b, scale),
                Some(m) => add(&m, &scaled(&b, scale)),
            });
        }
        let loss = mean.expect("batch is non-empty");
        let grad_norm = clip_grad_norm(&mut grads, self.model.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(PipelineError::NonFinite { step: next, detail: "gradient norm".into() });
        }
        let optim = self.model.cfg.optim;
        optim.step(&mut self.model.store, &grads, &mut self.state)?;
        self.step = next;
        Ok(StepLog { step: next, loss, grad_norm })
    }
}

fn scaled(b: &LossBreakdown, s: f64) -> LossBreakdown {
    if s == 1.0 {
        return b.clone();
    }
    LossBreakdown {
        total: b.total * s,
        depth: b.depth * s,
        seg: b.seg * s,
        mask_cls: b.mask_cls * s,
        groups: b.groups.iter().map(|g| g * s).collect(),
    }
}

fn add(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        total: a.total + b.total,
        depth: a.depth + b.depth,
        seg: a.seg + b.seg,
        mask_cls: a.mask_cls + b.mask_cls,
        groups: a.groups.iter().zip(&b.groups).map(|(x, y)| x + y).collect(),
    }
}
