//! Semantic voxel grids and the `OVG1` binary format.

use std::io::{Read, Write};

use super::SceneError;

/// Label of a free voxel.
pub const EMPTY: u16 = u16::MAX;

const OVG_MAGIC: &[u8; 4] = b"OVG1";

/// Metric frame of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// Edge length of a cubic voxel, metres.
    pub voxel_size: f64,
    /// Metric position of the `(0,0,0)` voxel's minimum corner.
    pub origin: [f64; 3],
}

impl GridSpec {
    /// 32×32×8 at 0.5 m, ego at the horizontal centre, ground layer at z ∈ [-1, -0.5).
    pub fn desk() -> Self {
        Self { dims: [32, 32, 8], voxel_size: 0.5, origin: [-8.0, -8.0, -1.0] }
    }

    /// 200×200×16 at 0.4 m over [-40, 40]² × [-1, 5.4].
    pub fn full_scale() -> Self {
        Self { dims: [200, 200, 16], voxel_size: 0.4, origin: [-40.0, -40.0, -1.0] }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.dims.contains(&0) || !(self.voxel_size > 0.0) {
            return Err(SceneError::InvalidSpec(format!("bad grid {self:?}")));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn extent(&self) -> [f64; 3] {
        self.dims.map(|d| d as f64 * self.voxel_size)
    }

    /// Flat index with z fastest, matching `[C, X, Y, Z]` feature volumes.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn voxel_center(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [0, 1, 2].map(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size)
    }

    /// Voxel containing a metric point, if inside the grid.
    pub fn voxel_of_point(&self, p: [f64; 3]) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            c[a] = f as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    /// Horizontal centre of the grid at height `z`.
    pub fn center_at(&self, z: f64) -> [f64; 3] {
        let e = self.extent();
        [self.origin[0] + e[0] / 2.0, self.origin[1] + e[1] / 2.0, z]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Category {
    pub name: String,
    pub foreground: bool,
}

/// Ordered category table; a category's id is its position.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryTable(pub Vec<Category>);

impl CategoryTable {
    pub fn new(cats: impl IntoIterator<Item = (impl Into<String>, bool)>) -> Self {
        Self(cats.into_iter().map(|(n, fg)| Category { name: n.into(), foreground: fg }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn name(&self, id: u16) -> &str {
        if id == EMPTY {
            "empty"
        } else {
            &self.0[id as usize].name
        }
    }

    pub fn is_foreground(&self, id: u16) -> bool {
        self.0[id as usize].foreground
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.0.iter().position(|c| c.name == name).map(|i| i as u16)
    }
}

/// Ground-truth world: one category id (or [`EMPTY`]) per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVoxelGrid {
    pub spec: GridSpec,
    pub categories: CategoryTable,
    labels: Vec<u16>,
}

impl SemanticVoxelGrid {
    pub fn empty(spec: GridSpec, categories: CategoryTable) -> Self {
        Self { labels: vec![EMPTY; spec.n_voxels()], spec, categories }
    }

    pub fn from_labels(
        spec: GridSpec,
        categories: CategoryTable,
        labels: Vec<u16>,
    ) -> Result<Self, SceneError> {
        spec.validate()?;
        if labels.len() != spec.n_voxels() {
            return Err(SceneError::InvalidSpec(format!(
                "{} labels for {} voxels",
                labels.len(),
                spec.n_voxels()
            )));
        }
        let n = categories.len();
        if let Some(bad) = labels.iter().find(|&&l| l != EMPTY && l as usize >= n) {
            return Err(SceneError::UnknownCategory(*bad));
        }
        Ok(Self { spec, categories, labels })
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, idx: usize) -> u16 {
        self.labels[idx]
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.labels[idx] != EMPTY
    }

    pub fn set(&mut self, idx: usize, label: u16) {
        debug_assert!(label == EMPTY || (label as usize) < self.categories.len());
        self.labels[idx] = label;
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY).count()
    }

    /// Fraction of free voxels.
    pub fn free_fraction(&self) -> f64 {
        1.0 - self.occupied_count() as f64 / self.labels.len() as f64
    }

    /// Reattaches foreground flags after reading a file (names must match).
    pub fn with_category_flags(mut self, table: &CategoryTable) -> Result<Self, SceneError> {
        if table.0.iter().map(|c| &c.name).ne(self.categories.0.iter().map(|c| &c.name)) {
            return Err(SceneError::Format("category names do not match table".into()));
        }
        self.categories = table.clone();
        Ok(self)
    }

    pub fn write_ovg1(&self, mut w: impl Write) -> Result<(), SceneError> {
        let [x, y, z] = self.spec.dims;
        let mut buf = Vec::with_capacity(32 + 2 * self.labels.len());
        buf.extend_from_slice(OVG_MAGIC);
        for d in [x, y, z] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.spec.voxel_size as f32).to_le_bytes());
        for o in self.spec.origin {
            buf.extend_from_slice(&(o as f32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.categories.len() as u16).to_le_bytes());
        for c in &self.categories.0 {
            let bytes = c.name.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(bytes);
        }
        // x fastest on disk
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    buf.extend_from_slice(&self.labels[self.spec.index(i, j, k)].to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads an `OVG1` grid. Foreground flags are not stored and come back `false`.
    pub fn read_ovg1(mut r: impl Read) -> Result<Self, SceneError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { data: &bytes, pos: 0 };
        if cur.take(4)? != OVG_MAGIC {
            return Err(SceneError::Format("missing OVG1 magic".into()));
        }
        let dims = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
        let voxel_size = cur.f32()? as f64;
        let origin = [cur.f32()? as f64, cur.f32()? as f64, cur.f32()? as f64];
        let spec = GridSpec { dims, voxel_size, origin };
        spec.validate()?;
        let n_cat = cur.u16()? as usize;
        let mut cats = Vec::with_capacity(n_cat);
        for _ in 0..n_cat {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| SceneError::Format(format!("category name: {e}")))?;
            cats.push(Category { name: name.to_owned(), foreground: false });
        }
        let mut labels = vec![EMPTY; spec.n_voxels()];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    labels[spec.index(i, j, k)] = cur.u16()?;
                }
            }
        }
        if cur.pos != bytes.len() {
            return Err(SceneError::Format("trailing bytes after labels".into()));
        }
        Self::from_labels(spec, CategoryTable(cats), labels)
    }
}

/// Per-category occupied-voxel counts.
pub fn class_histogram(grid: &SemanticVoxelGrid) -> Vec<u64> {
    let mut counts = vec![0u64; grid.categories.len()];
    for &l in grid.labels() {
        if l != EMPTY {
            counts[l as usize] += 1;
        }
    }
    counts
}

pub(crate) struct Cursor<'a> {
    pub data: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        if self.pos + n > self.data.len() {
            return Err(SceneError::Format("unexpected end of data".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16, SceneError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, SceneError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
