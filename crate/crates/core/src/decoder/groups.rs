//! Coarse-to-fine label groups: construction from class counts, per-group
//! relabelling, and a key-value document form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::DecoderError;
use crate::scene::{CategoryTable, EMPTY};

pub const FOREGROUND: &str = "foreground";
pub const BACKGROUND: &str = "background";
pub const OTHERS: &str = "others";
pub const EMPTY_LABEL: &str = "empty";

/// One label group with its relabelling table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGroup {
    /// Ordered label names; `empty` is always last.
    pub labels: Vec<String>,
    /// Original category id → group label index.
    pub relabel: Vec<u16>,
}

impl LabelGroup {
    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn empty_label(&self) -> u16 {
        (self.labels.len() - 1) as u16
    }

    pub fn label_of(&self, original: u16) -> Result<u16, DecoderError> {
        if original == EMPTY {
            return Ok(self.empty_label());
        }
        self.relabel.get(original as usize).copied().ok_or(DecoderError::UnknownCategory(original))
    }
}

/// Upper sample-count bounds splitting each partition into middle groups.
///
/// With `m` middle groups each list holds `m - 1` ascending boundaries
/// `b_1 < … < b_{m-1}`. Middle group `n` (0 = coarsest) takes counts in
/// `(b_{m-1-n}, b_{m-n}]` with `b_0 = 0` and `b_m = ∞`, so head classes land
/// in the first middle group and tail classes in the last.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupThresholds {
    pub foreground: Vec<f64>,
    pub background: Vec<f64>,
}

impl GroupThresholds {
    /// Boundaries at the `j/m` quantiles of each partition's counts
    /// (linear interpolation), which for `m = 2` is the median split.
    pub fn quantiles(histogram: &[u64], categories: &CategoryTable, middle: usize) -> Self {
        let part = |fg: bool| {
            let mut c: Vec<f64> = (0..categories.len())
                .filter(|&i| categories.is_foreground(i as u16) == fg)
                .map(|i| histogram[i] as f64)
                .collect();
            c.sort_by(f64::total_cmp);
            (1..middle).map(|j| quantile(&c, j as f64 / middle as f64)).collect()
        };
        Self { foreground: part(true), background: part(false) }
    }

    pub fn validate(&self, middle: usize) -> Result<(), DecoderError> {
        for (name, b) in [(FOREGROUND, &self.foreground), (BACKGROUND, &self.background)] {
            if b.len() != middle.saturating_sub(1) {
                return Err(DecoderError::Groups(format!(
                    "{name} thresholds: {} boundaries for {middle} middle groups",
                    b.len()
                )));
            }
            if b.iter().any(|v| !v.is_finite() || *v < 0.0) || b.windows(2).any(|w| w[0] > w[1]) {
                return Err(DecoderError::Groups(format!("{name} thresholds must be ascending: {b:?}")));
            }
        }
        Ok(())
    }

    /// `(low, high]` range of middle group `n` for one partition.
    pub fn range(bounds: &[f64], n: usize) -> (f64, f64) {
        let m = bounds.len() + 1;
        let edge = |k: usize| match k {
            0 => 0.0,
            k if k == m => f64::INFINITY,
            k => bounds[k - 1],
        };
        (edge(m - 1 - n), edge(m - n))
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `K` ordered groups from coarsest (`{foreground, background, empty}`) to
/// finest (every original category plus `empty`).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGroupSpec {
    pub categories: CategoryTable,
    pub groups: Vec<LabelGroup>,
    pub thresholds: GroupThresholds,
    /// Categories with zero samples, placed in the finest middle group.
    pub zero_count: Vec<u16>,
}

impl SemanticGroupSpec {
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    /// The group kept at inference (the original labels).
    pub fn finest(&self) -> &LabelGroup {
        self.groups.last().expect("at least one group")
    }

    /// Only the original labels; the decoder then trains a plain
    /// single-group mask classifier.
    pub fn single(categories: &CategoryTable) -> Self {
        Self {
            categories: categories.clone(),
            groups: vec![finest_group(categories)],
            thresholds: GroupThresholds::default(),
            zero_count: Vec::new(),
        }
    }

    /// Checks every structural invariant of a multi-group spec.
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::Groups(m));
        let n = self.categories.len();
        for (g, grp) in self.groups.iter().enumerate() {
            if grp.labels.last().map(String::as_str) != Some(EMPTY_LABEL) {
                return bad(format!("group {g} does not end with empty"));
            }
            if grp.relabel.len() != n || grp.relabel.iter().any(|&l| l as usize >= grp.n_labels() - 1) {
                return bad(format!("group {g} relabel table is not total over the categories"));
            }
        }
        if self.groups.len() == 1 {
            return if self.groups[0] == finest_group(&self.categories) { Ok(()) } else { bad("single group must be the original labels".into()) };
        }
        let first = &self.groups[0];
        if first.labels != [FOREGROUND, BACKGROUND, EMPTY_LABEL] {
            return bad(format!("first group is {:?}", first.labels));
        }
        for c in 0..n {
            let want = if self.categories.is_foreground(c as u16) { 0 } else { 1 };
            if first.relabel[c] != want {
                return bad(format!("first group maps {} to the wrong partition", self.categories.name(c as u16)));
            }
        }
        if *self.finest() != finest_group(&self.categories) {
            return bad("last group is not the original labels".into());
        }
        let middle = &self.groups[1..self.groups.len() - 1];
        self.thresholds.validate(middle.len())?;
        let mut slots = vec![0usize; n];
        for (g, grp) in middle.iter().enumerate() {
            if grp.labels.first().map(String::as_str) != Some(OTHERS) {
                return bad(format!("middle group {} does not start with others", g + 1));
            }
            for c in 0..n {
                let l = grp.relabel[c] as usize;
                if l > 0 {
                    if grp.labels[l] != self.categories.name(c as u16) {
                        return bad(format!("middle group {} slot {l} mislabelled", g + 1));
                    }
                    slots[c] += 1;
                }
            }
            if grp.labels.len() != 2 + grp.relabel.iter().filter(|&&l| l > 0).count() {
                return bad(format!("middle group {} has unused labels", g + 1));
            }
        }
        if !middle.is_empty() {
            if let Some(c) = slots.iter().position(|&s| s != 1) {
                return bad(format!("{} appears in {} middle groups", self.categories.name(c as u16), slots[c]));
            }
        }
        Ok(())
    }

    /// Key-value document: one `key = value` pair per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = (0..self.categories.len()).map(|i| self.categories.name(i as u16)).collect();
        let fg: Vec<&str> = (0..self.categories.len())
            .map(|i| if self.categories.is_foreground(i as u16) { "1" } else { "0" })
            .collect();
        let _ = writeln!(s, "categories = {}", names.join(","));
        let _ = writeln!(s, "foreground = {}", fg.join(","));
        let _ = writeln!(s, "groups = {}", self.groups.len());
        for (g, grp) in self.groups.iter().enumerate() {
            let map: Vec<String> = grp.relabel.iter().map(u16::to_string).collect();
            let _ = writeln!(s, "group.{g}.labels = {}", grp.labels.join(","));
            let _ = writeln!(s, "group.{g}.relabel = {}", map.join(","));
        }
        let fmt = |b: &[f64]| b.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "thresholds.foreground = {}", fmt(&self.thresholds.foreground));
        let _ = writeln!(s, "thresholds.background = {}", fmt(&self.thresholds.background));
        let zero: Vec<String> = self.zero_count.iter().map(u16::to_string).collect();
        let _ = writeln!(s, "zero_count = {}", zero.join(","));
        s
    }

    pub fn from_kv(text: &str) -> Result<Self, DecoderError> {
        let bad = |m: String| DecoderError::Groups(m);
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key = value", i + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| bad(format!("missing key {k}")));
        let list = |v: &str| -> Vec<String> {
            if v.is_empty() { Vec::new() } else { v.split(',').map(|s| s.trim().to_string()).collect() }
        };
        let nums = |v: &str| -> Result<Vec<u16>, DecoderError> {
            list(v).iter().map(|s| s.parse().map_err(|_| bad(format!("bad integer {s:?}")))).collect()
        };
        let floats = |v: &str| -> Result<Vec<f64>, DecoderError> {
            list(v).iter().map(|s| s.parse().map_err(|_| bad(format!("bad number {s:?}")))).collect()
        };
        let names = list(get("categories")?);
        let fg = nums(get("foreground")?)?;
        if fg.len() != names.len() {
            return Err(bad("foreground flags do not match categories".into()));
        }
        let categories = CategoryTable::new(names.iter().zip(&fg).map(|(n, &f)| (n.as_str(), f == 1)));
        let k: usize = get("groups")?.parse().map_err(|_| bad("bad group count".into()))?;
        let mut groups = Vec::with_capacity(k);
        for g in 0..k {
            groups.push(LabelGroup {
                labels: list(get(&format!("group.{g}.labels"))?),
                relabel: nums(get(&format!("group.{g}.relabel"))?)?,
            });
        }
        let thresholds = GroupThresholds {
            foreground: floats(get("thresholds.foreground")?)?,
            background: floats(get("thresholds.background")?)?,
        };
        let zero_count = nums(get("zero_count")?)?;
        let spec = Self { categories, groups, thresholds, zero_count };
        spec.validate()?;
        Ok(spec)
    }
}

fn finest_group(categories: &CategoryTable) -> LabelGroup {
    let mut labels: Vec<String> = (0..categories.len()).map(|i| categories.name(i as u16).to_string()).collect();
    labels.push(EMPTY_LABEL.into());
    LabelGroup { labels, relabel: (0..categories.len() as u16).collect() }
}

/// Builds `K ≥ 2` groups. `thresholds` defaults to the per-partition quantile
/// split (median for `K = 4`). Zero-count categories go to the finest middle
/// group and are listed in `zero_count`.
pub fn build_semantic_groups(
    histogram: &[u64],
    categories: &CategoryTable,
    k: usize,
    thresholds: Option<GroupThresholds>,
) -> Result<SemanticGroupSpec, DecoderError> {
    if k < 2 {
        return Err(DecoderError::Groups(format!("need K >= 2, got {k}")));
    }
    if categories.is_empty() || histogram.len() != categories.len() {
        return Err(DecoderError::Groups(format!(
            "histogram has {} entries for {} categories",
            histogram.len(),
            categories.len()
        )));
    }
    let middle = k - 2;
    let thresholds = thresholds.unwrap_or_else(|| GroupThresholds::quantiles(histogram, categories, middle));
    thresholds.validate(middle)?;
    let n = categories.len();
    let mut groups = vec![LabelGroup {
        labels: vec![FOREGROUND.into(), BACKGROUND.into(), EMPTY_LABEL.into()],
        relabel: (0..n).map(|c| if categories.is_foreground(c as u16) { 0 } else { 1 }).collect(),
    }];
    let zero_count: Vec<u16> = (0..n as u16).filter(|&c| histogram[c as usize] == 0).collect();
    for g in 0..middle {
        let mut labels = vec![OTHERS.to_string()];
        let mut relabel = vec![0u16; n];
        for c in 0..n {
            let bounds = if categories.is_foreground(c as u16) { &thresholds.foreground } else { &thresholds.background };
            let (lo, hi) = GroupThresholds::range(bounds, g);
            let count = histogram[c] as f64;
            let hit = if count == 0.0 { g == middle - 1 } else { lo < count && count <= hi };
            if hit {
                relabel[c] = labels.len() as u16;
                labels.push(categories.name(c as u16).to_string());
            }
        }
        labels.push(EMPTY_LABEL.into());
        groups.push(LabelGroup { labels, relabel });
    }
    groups.push(finest_group(categories));
    let spec = SemanticGroupSpec { categories: categories.clone(), groups, thresholds, zero_count };
    spec.validate()?;
    Ok(spec)
}

/// Per-voxel group labels for `labels` (original ids or `EMPTY`).
pub fn relabel_for_group(labels: &[u16], group: &LabelGroup) -> Result<Vec<u16>, DecoderError> {
    labels.iter().map(|&l| group.label_of(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> CategoryTable {
        CategoryTable::new([("road", false), ("car", true), ("truck", true), ("bike", true), ("cone", true)])
    }

    #[test]
    fn median_split_by_hand() {
        let spec = build_semantic_groups(&[5000, 1000, 800, 50, 40], &table(), 4, None).unwrap();
        assert_eq!(spec.groups[1].labels, ["others", "car", "truck", "empty"]);
        assert_eq!(spec.groups[2].labels, ["others", "road", "bike", "cone", "empty"]);
        assert_eq!(spec.thresholds.foreground, vec![425.0]);
    }

    #[test]
    fn two_groups_are_coarse_and_original() {
        let spec = build_semantic_groups(&[1, 2, 3, 4, 5], &table(), 2, None).unwrap();
        assert_eq!(spec.k(), 2);
        assert_eq!(spec.groups[0].labels, ["foreground", "background", "empty"]);
        assert_eq!(spec.groups[1].labels, ["road", "car", "truck", "bike", "cone", "empty"]);
    }

    #[test]
    fn zero_count_goes_to_finest_middle_group() {
        let spec = build_semantic_groups(&[10, 0, 30, 20, 5], &table(), 5, None).unwrap();
        assert_eq!(spec.zero_count, vec![1]);
        assert!(spec.groups[3].labels.contains(&"car".to_string()));
    }

    #[test]
    fn kv_round_trip() {
        let spec = build_semantic_groups(&[5000, 1000, 800, 50, 40], &table(), 6, None).unwrap();
        let text = spec.to_kv();
        let back = SemanticGroupSpec::from_kv(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_kv(), text);
    }

    #[test]
    fn rejects_k_below_two_and_bad_thresholds() {
        assert!(build_semantic_groups(&[1; 5], &table(), 1, None).is_err());
        let t = GroupThresholds { foreground: vec![5.0, 1.0], background: vec![1.0, 2.0] };
        assert!(build_semantic_groups(&[1; 5], &table(), 5, Some(t)).is_err());
    }

    #[test]
    fn relabel_maps_empty_and_rejects_unknown() {
        let spec = build_semantic_groups(&[5000, 1000, 800, 50, 40], &table(), 4, None).unwrap();
        let g = &spec.groups[1];
        assert_eq!(relabel_for_group(&[EMPTY, 3, 1], g).unwrap(), vec![3, 0, 1]);
        assert!(matches!(relabel_for_group(&[9], g), Err(DecoderError::UnknownCategory(9))));
    }
}
