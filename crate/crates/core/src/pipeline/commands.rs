//! The five CLI verbs as library functions: generate, train, eval, export
//! and ablate. Each writes its artifacts under a directory it is given.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::{file_sha256, Checkpoint, Dataset, Model, PipelineError, RunConfig, StepLog, Trainer};
use crate::decoder::SemanticGroupSpec;
use crate::metrics::{gt_substitution_proxy, per_class_report, semantic_miou, EvalReport};
use crate::scene::{export_ply, SemanticVoxelGrid, EMPTY};
use crate::tensor::OptimizerState;

pub const CHECKPOINT_FILE: &str = "checkpoint.ock";
pub const LOSS_LOG: &str = "loss.log";

/// Generates the dataset described by `cfg` and writes it to `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Dataset, PipelineError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    data.write(cfg, out)?;
    Ok(data)
}

fn write_log(path: &Path, logs: &[StepLog]) -> Result<(), PipelineError> {
    let mut s = String::new();
    for l in logs {
        let _ = writeln!(s, "{}", l.line());
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a loss log written by [`cmd_train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>, PipelineError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| StepLog::parse(l).ok_or_else(|| PipelineError::Data(format!("bad loss log line {l:?}"))))
        .collect()
}

/// Trains on the dataset in `data_dir` up to `train.steps`, writing the
/// config snapshot, groups, loss log and checkpoint into `run_dir`. With
/// `resume`, parameters, moments and step come from that checkpoint and the
/// log keeps its lines up to the resumed step.
///
/// On a non-finite loss the last good state is checkpointed before the error
/// is returned.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    run_dir: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>, PipelineError> {
    cfg.validate()?;
    let data = Dataset::read(cfg, data_dir)?;
    fs::create_dir_all(run_dir)?;
    let log_path = run_dir.join(LOSS_LOG);
    let (mut trainer, mut logs) = match resume {
        Some(p) => {
            let t = Trainer::resume(cfg, &data, &Checkpoint::read(p)?)?;
            let old = if log_path.exists() { read_loss_log(&log_path)? } else { Vec::new() };
            let keep = old.into_iter().filter(|l| l.step <= t.step).collect();
            (t, keep)
        }
        None => (Trainer::fresh(cfg, &data)?, Vec::new()),
    };
    fs::write(run_dir.join("config.kv"), cfg.to_kv())?;
    fs::write(run_dir.join("groups.kv"), trainer.model.groups.to_kv())?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    while trainer.step < cfg.train.steps {
        match trainer.step() {
            Ok(l) => {
                progress(&l);
                logs.push(l);
            }
            Err(e) => {
                write_log(&log_path, &logs)?;
                trainer.checkpoint()?.write(&ckpt_path)?;
                return Err(e);
            }
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            trainer.checkpoint()?.write(&ckpt_path)?;
            write_log(&log_path, &logs)?;
        }
    }
    write_log(&log_path, &logs)?;
    trainer.checkpoint()?.write(&ckpt_path)?;
    Ok(logs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Restrict scoring to voxels visible from the rig.
    pub visible_mask: bool,
    /// Also score the ground-truth substitution proxy.
    pub proxy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    /// Pooled over scenes.
    pub report: EvalReport,
    pub proxy: Option<EvalReport>,
    /// Ground-truth occupancy with every occupied voxel given the most
    /// frequent training class.
    pub baseline: EvalReport,
    pub per_scene: Vec<EvalReport>,
}

/// Oracle geometry labelled with the majority class of `histogram`.
pub fn majority_baseline(gt: &SemanticVoxelGrid, histogram: &[u64]) -> SemanticVoxelGrid {
    let major = (0..histogram.len()).fold(0, |b, c| if histogram[c] > histogram[b] { c } else { b }) as u16;
    let labels = gt.labels().iter().map(|&l| if l == EMPTY { EMPTY } else { major }).collect();
    SemanticVoxelGrid::from_labels(gt.spec, gt.categories.clone(), labels).expect("same shape and table")
}

/// Scores `model` on every scene of `data`.
pub fn evaluate(model: &Model, data: &Dataset, opts: EvalOptions) -> Result<EvalSummary, PipelineError> {
    let hist = data.histogram();
    let (mut raw, mut proxy, mut base) = (Vec::new(), Vec::new(), Vec::new());
    for scene in &data.scenes {
        let pred = model.predict(scene)?;
        let mask = opts.visible_mask.then_some(scene.visible.as_slice());
        raw.push(semantic_miou(&pred, &scene.grid, mask)?);
        if opts.proxy {
            proxy.push(gt_substitution_proxy(&pred, &scene.grid, mask)?);
        }
        base.push(semantic_miou(&majority_baseline(&scene.grid, &hist), &scene.grid, mask)?);
    }
    Ok(EvalSummary {
        report: per_class_report(&raw)?,
        proxy: if opts.proxy { Some(per_class_report(&proxy)?) } else { None },
        baseline: per_class_report(&base)?,
        per_scene: raw,
    })
}

/// Loads a checkpoint for inference after checking it was trained with the
/// same model config.
pub fn load_model(cfg: &RunConfig, data: &Dataset, ckpt: &Checkpoint) -> Result<Model, PipelineError> {
    if !ckpt.matches(&cfg.model_hash()) {
        return Err(PipelineError::Mismatch(format!(
            "checkpoint config hash {} differs from {}",
            ckpt.hash_hex(),
            cfg.model_hash()
        )));
    }
    let mut model = Model::new(cfg, &data.rig, SemanticGroupSpec::from_kv(&ckpt.groups)?)?;
    let mut state = OptimizerState::new(&model.store);
    ckpt.restore(&mut model, &mut state)?;
    Ok(model)
}

/// Evaluates a checkpoint on the dataset in `data_dir`, writing reports into
/// `out` when given. The checkpoint file is verified unchanged afterwards.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    opts: EvalOptions,
    out: Option<&Path>,
) -> Result<EvalSummary, PipelineError> {
    let before = file_sha256(checkpoint)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    let data = Dataset::read(cfg, data_dir)?;
    let model = load_model(cfg, &data, &ckpt)?;
    let summary = evaluate(&model, &data, opts)?;
    if file_sha256(checkpoint)? != before {
        return Err(PipelineError::Checkpoint("checkpoint changed during evaluation".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.kv"), summary.report.to_kv())?;
        fs::write(dir.join("eval.txt"), summary.report.to_table())?;
        fs::write(dir.join("baseline.kv"), summary.baseline.to_kv())?;
        if let Some(p) = &summary.proxy {
            fs::write(dir.join("proxy.kv"), p.to_kv())?;
        }
    }
    Ok(summary)
}

pub enum ExportSource<'a> {
    /// An OVG1 grid file.
    Grid(&'a Path),
    /// Predictions of a checkpoint on every scene of a dataset.
    Checkpoint { cfg: &'a RunConfig, checkpoint: &'a Path, data_dir: &'a Path },
}

fn export_grid(grid: &SemanticVoxelGrid, out: &Path, stem: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let ply = out.join(format!("{stem}.ply"));
    let ovg = out.join(format!("{stem}.ovg"));
    fs::write(&ply, export_ply(grid))?;
    grid.write_ovg1(BufWriter::new(fs::File::create(&ovg)?))?;
    Ok(vec![ply, ovg])
}

/// Writes PLY cubes and the raw OVG1 volume for each exported grid.
pub fn cmd_export(src: ExportSource<'_>, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out)?;
    match src {
        ExportSource::Grid(path) => {
            let grid = SemanticVoxelGrid::read_ovg1(fs::File::open(path)?)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
            export_grid(&grid, out, stem)
        }
        ExportSource::Checkpoint { cfg, checkpoint, data_dir } => {
            let data = Dataset::read(cfg, data_dir)?;
            let model = load_model(cfg, &data, &Checkpoint::read(checkpoint)?)?;
            let mut files = Vec::new();
            for (i, scene) in data.scenes.iter().enumerate() {
                files.extend(export_grid(&model.predict(scene)?, out, &format!("scene_{i:03}_pred"))?);
            }
            Ok(files)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateAxis {
    Grouping,
    CompactDims,
    Ivt,
}

impl std::str::FromStr for AblateAxis {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grouping" => Ok(Self::Grouping),
            "compact-dims" => Ok(Self::CompactDims),
            "ivt" | "ivt-on/off" => Ok(Self::Ivt),
            _ => Err(PipelineError::Config(format!("unknown ablation axis {s:?} (grouping, compact-dims, ivt)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub groups: usize,
    pub compact_ratio: [usize; 3],
    pub ivt: bool,
    /// Full-grid cells per compact cell.
    pub cell_ratio: f64,
    /// Multiply-adds of one inference pass on the first scene.
    pub inference_ops: u64,
    /// The image cross-attention share of `inference_ops`.
    pub cross_attention_ops: u64,
    pub final_loss: f64,
    pub report: EvalReport,
}

fn variants(cfg: &RunConfig, axis: AblateAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match axis {
        AblateAxis::Grouping => {
            let k = if cfg.groups > 1 { cfg.groups } else { 4 };
            vec![("K=1".into(), with(&|c| c.groups = 1)), (format!("K={k}"), with(&|c| c.groups = k))]
        }
        AblateAxis::CompactDims => [[2, 2, 1], [4, 4, 1]]
            .into_iter()
            .map(|r| (format!("ratio={}x{}x{}", r[0], r[1], r[2]), with(&|c| c.encoder.compact_ratio = r)))
            .collect(),
        AblateAxis::Ivt => {
            vec![("ivt=off".into(), with(&|c| c.ivt_enabled = false)), ("ivt=on".into(), with(&|c| c.ivt_enabled = true))]
        }
    }
}

/// Trains one matched run per variant of `axis` on the same generated data
/// and seeds, then evaluates each on that data.
pub fn cmd_ablate(cfg: &RunConfig, axis: AblateAxis, out: Option<&Path>) -> Result<Vec<AblationRow>, PipelineError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let mut rows = Vec::new();
    for (name, c) in variants(cfg, axis) {
        c.validate()?;
        let mut trainer = Trainer::fresh(&c, &data)?;
        let mut last = f64::NAN;
        while trainer.step < c.train.steps {
            last = trainer.step()?.loss.total;
        }
        let report = evaluate(&trainer.model, &data, EvalOptions::default())?.report;
        let (_, stats) = trainer.model.predict_labels(&trainer.prepared[0].images)?;
        let r = c.encoder.compact_ratio;
        rows.push(AblationRow {
            variant: name,
            groups: c.groups,
            compact_ratio: r,
            ivt: c.ivt_enabled,
            cell_ratio: (r[0] * r[1] * r[2]) as f64,
            inference_ops: stats.total,
            cross_attention_ops: stats.get("deformable_attention_2d"),
            final_loss: last,
            report,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.kv"), cfg.to_kv())?;
        fs::write(dir.join("ablation.txt"), ablation_table(&rows))?;
    }
    Ok(rows)
}

/// Side-by-side report. Per-category IoU deltas are last row minus first.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>3} {:>7} {:>4} {:>10} {:>14} {:>12} {:>10} {:>8} {:>8}",
        "variant", "K", "ratio", "ivt", "cell ratio", "inference ops", "sca ops", "loss", "geo IoU", "mIoU"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:>3} {:>7} {:>4} {:>10.1} {:>14} {:>12} {:>10.4} {:>8.4} {:>8.4}",
            r.variant,
            r.groups,
            format!("{}x{}x{}", r.compact_ratio[0], r.compact_ratio[1], r.compact_ratio[2]),
            if r.ivt { "on" } else { "off" },
            r.cell_ratio,
            r.inference_ops,
            r.cross_attention_ops,
            r.final_loss,
            r.report.geometry_iou,
            r.report.miou
        );
    }
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        let _ = writeln!(s, "\nper-category IoU, {} minus {} (rarest last)", last.variant, first.variant);
        let _ = writeln!(s, "{:<16} {:>10} {:>8} {:>8} {:>8}", "category", "gt voxels", first.variant, last.variant, "delta");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for c in last.report.long_tail_table() {
            let a = first.report.iou_of(&c.name);
            let b = c.iou;
            let d = a.zip(b).map(|(a, b)| b - a);
            let _ = writeln!(s, "{:<16} {:>10} {:>8} {:>8} {:>8}", c.name, c.gt_count, f(a), f(b), f(d));
        }
    }
    s
}
