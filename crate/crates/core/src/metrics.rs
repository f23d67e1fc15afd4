//! Geometry IoU, per-category IoU and mIoU with optional visibility
//! filtering, the ground-truth substitution proxy, and dataset pooling.

use std::fmt::Write as _;

use crate::scene::{SemanticVoxelGrid, EMPTY};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("grid dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("visible mask has {0} entries for {1} voxels")]
    MaskLength(usize, usize),
    #[error("category tables differ")]
    Categories,
    #[error("no reports to aggregate")]
    NoReports,
}

/// Raw counts behind a report; pooling adds these before taking ratios.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub occupied_tp: u64,
    pub occupied_fp: u64,
    pub occupied_fn: u64,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub gt: Vec<u64>,
    /// Voxels that entered the evaluation.
    pub evaluated: u64,
}

impl Counts {
    fn new(n: usize) -> Self {
        Self { tp: vec![0; n], fp: vec![0; n], fn_: vec![0; n], gt: vec![0; n], ..Self::default() }
    }

    fn add(&mut self, o: &Counts) {
        self.occupied_tp += o.occupied_tp;
        self.occupied_fp += o.occupied_fp;
        self.occupied_fn += o.occupied_fn;
        self.evaluated += o.evaluated;
        for (a, b) in [(&mut self.tp, &o.tp), (&mut self.fp, &o.fp), (&mut self.fn_, &o.fn_), (&mut self.gt, &o.gt)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassIou {
    pub name: String,
    /// `None` when the category is absent from both prediction and truth.
    pub iou: Option<f64>,
    pub gt_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub geometry_iou: f64,
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
    pub visible_mask: bool,
    pub proxy: bool,
    pub counts: Counts,
}

fn ratio(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let den = tp + fp + fn_;
    (den > 0).then(|| tp as f64 / den as f64)
}

impl EvalReport {
    /// Ratios from counts. An empty union counts as a perfect geometry IoU;
    /// with no category present the mIoU is also 1.
    fn from_counts(names: &[String], counts: Counts, visible_mask: bool, proxy: bool) -> Self {
        let per_class: Vec<ClassIou> = names
            .iter()
            .enumerate()
            .map(|(c, n)| ClassIou {
                name: n.clone(),
                iou: ratio(counts.tp[c], counts.fp[c], counts.fn_[c]),
                gt_count: counts.gt[c],
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let miou = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let geometry_iou = ratio(counts.occupied_tp, counts.occupied_fp, counts.occupied_fn).unwrap_or(1.0);
        Self { geometry_iou, per_class, miou, visible_mask, proxy, counts }
    }

    pub fn iou_of(&self, name: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.name == name).and_then(|c| c.iou)
    }

    /// Categories ordered by ground-truth count, largest first (ties by name).
    pub fn long_tail_table(&self) -> Vec<&ClassIou> {
        let mut rows: Vec<&ClassIou> = self.per_class.iter().collect();
        rows.sort_by(|a, b| b.gt_count.cmp(&a.gt_count).then_with(|| a.name.cmp(&b.name)));
        rows
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "geometry IoU  {:.4}", self.geometry_iou);
        let _ = writeln!(s, "mIoU          {:.4}", self.miou);
        let _ = writeln!(s, "evaluated     {} voxels (visible mask {})", self.counts.evaluated, self.visible_mask);
        let _ = writeln!(s, "{:<16} {:>10} {:>8}", "category", "gt voxels", "IoU");
        for c in self.long_tail_table() {
            let iou = c.iou.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:<16} {:>10} {:>8}", c.name, c.gt_count, iou);
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "geometry_iou = {:?}", self.geometry_iou);
        let _ = writeln!(s, "miou = {:?}", self.miou);
        let _ = writeln!(s, "visible_mask = {}", self.visible_mask);
        let _ = writeln!(s, "proxy = {}", self.proxy);
        let _ = writeln!(s, "evaluated = {}", self.counts.evaluated);
        for (i, c) in self.per_class.iter().enumerate() {
            let iou = c.iou.map_or("none".to_string(), |v| format!("{v:?}"));
            let _ = writeln!(s, "class.{}.iou = {iou}", c.name);
            let _ = writeln!(
                s,
                "class.{}.counts = {},{},{},{}",
                c.name, self.counts.tp[i], self.counts.fp[i], self.counts.fn_[i], c.gt_count
            );
        }
        s
    }
}

fn check(pred: &SemanticVoxelGrid, gt: &SemanticVoxelGrid, mask: Option<&[bool]>) -> Result<(), MetricsError> {
    if pred.spec.dims != gt.spec.dims {
        return Err(MetricsError::DimMismatch(pred.spec.dims, gt.spec.dims));
    }
    if let Some(m) = mask {
        if m.len() != gt.spec.n_voxels() {
            return Err(MetricsError::MaskLength(m.len(), gt.spec.n_voxels()));
        }
    }
    if pred.categories.len() != gt.categories.len() {
        return Err(MetricsError::Categories);
    }
    Ok(())
}

fn count(pred: &[u16], gt: &[u16], n_cat: usize, mask: Option<&[bool]>) -> Counts {
    let mut c = Counts::new(n_cat);
    for i in 0..gt.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        c.evaluated += 1;
        let (p, g) = (pred[i], gt[i]);
        match (p != EMPTY, g != EMPTY) {
            (true, true) => c.occupied_tp += 1,
            (true, false) => c.occupied_fp += 1,
            (false, true) => c.occupied_fn += 1,
            (false, false) => {}
        }
        if g != EMPTY {
            c.gt[g as usize] += 1;
        }
        if p == g {
            if p != EMPTY {
                c.tp[p as usize] += 1;
            }
        } else {
            if p != EMPTY {
                c.fp[p as usize] += 1;
            }
            if g != EMPTY {
                c.fn_[g as usize] += 1;
            }
        }
    }
    c
}

fn names(grid: &SemanticVoxelGrid) -> Vec<String> {
    (0..grid.categories.len()).map(|i| grid.categories.name(i as u16).to_string()).collect()
}

/// `|occ ∩ occ| / |occ ∪ occ|` over the (masked) voxels.
pub fn geometry_iou(pred: &SemanticVoxelGrid, gt: &SemanticVoxelGrid, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    check(pred, gt, mask)?;
    let c = count(pred.labels(), gt.labels(), gt.categories.len(), mask);
    Ok(ratio(c.occupied_tp, c.occupied_fp, c.occupied_fn).unwrap_or(1.0))
}

/// Per-category IoU (empty excluded) and their mean over categories present
/// in either grid.
pub fn semantic_miou(
    pred: &SemanticVoxelGrid,
    gt: &SemanticVoxelGrid,
    mask: Option<&[bool]>,
) -> Result<EvalReport, MetricsError> {
    check(pred, gt, mask)?;
    let c = count(pred.labels(), gt.labels(), gt.categories.len(), mask);
    Ok(EvalReport::from_counts(&names(gt), c, mask.is_some(), false))
}

/// Keeps the predicted occupancy but copies ground-truth semantics onto
/// voxels occupied in both, then re-scores.
pub fn gt_substitution_proxy(
    pred: &SemanticVoxelGrid,
    gt: &SemanticVoxelGrid,
    mask: Option<&[bool]>,
) -> Result<EvalReport, MetricsError> {
    check(pred, gt, mask)?;
    let labels: Vec<u16> = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .map(|(&p, &g)| if p != EMPTY && g != EMPTY { g } else { p })
        .collect();
    let c = count(&labels, gt.labels(), gt.categories.len(), mask);
    Ok(EvalReport::from_counts(&names(gt), c, mask.is_some(), true))
}

/// Dataset-level report: counts pooled over scenes, then ratios.
pub fn per_class_report(reports: &[EvalReport]) -> Result<EvalReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    let names: Vec<String> = first.per_class.iter().map(|c| c.name.clone()).collect();
    let mut total = Counts::new(names.len());
    for r in reports {
        if r.per_class.len() != names.len() {
            return Err(MetricsError::Categories);
        }
        total.add(&r.counts);
    }
    Ok(EvalReport::from_counts(&names, total, first.visible_mask, first.proxy))
}
