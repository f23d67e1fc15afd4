//! Procedural scene generation from a class-distribution spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CategoryTable, GridSpec, SceneError, SemanticVoxelGrid, EMPTY};

/// Shape used to stamp a category into the grid. Sizes are in voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Bottom layer; later plane categories paint rectangular patches over it.
    GroundPlane,
    /// Axis-aligned box with per-axis size ranges (inclusive).
    Box { min: [usize; 3], max: [usize; 3] },
    /// Vertical cylinder, radius and height ranges.
    Cylinder { radius: (f64, f64), height: (usize, usize) },
    /// One-voxel column.
    Pole { height: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategorySpec {
    pub name: String,
    pub foreground: bool,
    pub weight: f64,
    pub primitive: Primitive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistributionSpec {
    pub categories: Vec<CategorySpec>,
    /// Category `i` gets effective weight `weight_i · (i+1)^-exponent`.
    pub long_tail_exponent: f64,
    /// Target fraction of all voxels occupied by non-plane categories.
    pub object_fraction: f64,
    /// Horizontal radius around the ego kept free above the ground, metres.
    pub ego_clearance: f64,
}

impl ClassDistributionSpec {
    /// Three background and five foreground categories with unit base weights.
    pub fn default_long_tail(exponent: f64) -> Self {
        use Primitive::*;
        let cat = |name: &str, fg: bool, primitive| CategorySpec {
            name: name.into(),
            foreground: fg,
            weight: 1.0,
            primitive,
        };
        Self {
            categories: vec![
                cat("ground", false, GroundPlane),
                cat("building", false, Box { min: [2, 2, 3], max: [5, 6, 7] }),
                cat("vegetation", false, Cylinder { radius: (0.8, 2.0), height: (2, 5) }),
                cat("car", true, Box { min: [2, 3, 2], max: [3, 4, 2] }),
                cat("truck", true, Box { min: [2, 4, 3], max: [3, 6, 4] }),
                cat("pedestrian", true, Pole { height: (3, 4) }),
                cat("bicycle", true, Box { min: [1, 2, 2], max: [1, 3, 2] }),
                cat("traffic_cone", true, Pole { height: (1, 2) }),
            ],
            long_tail_exponent: exponent,
            object_fraction: 0.08,
            ego_clearance: 2.5,
        }
    }

    pub fn category_table(&self) -> CategoryTable {
        CategoryTable::new(self.categories.iter().map(|c| (c.name.clone(), c.foreground)))
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        self.categories
            .iter()
            .enumerate()
            .map(|(i, c)| c.weight * ((i + 1) as f64).powf(-self.long_tail_exponent))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.categories.is_empty() {
            return Err(SceneError::InvalidSpec("class distribution has zero categories".into()));
        }
        if self.categories.len() >= EMPTY as usize {
            return Err(SceneError::InvalidSpec("too many categories".into()));
        }
        if let Some(c) = self.categories.iter().find(|c| !(c.weight > 0.0 && c.weight.is_finite())) {
            return Err(SceneError::InvalidSpec(format!("weight of {} must be positive", c.name)));
        }
        let ground = self
            .categories
            .iter()
            .find(|c| c.primitive == Primitive::GroundPlane);
        match ground {
            Some(c) if !c.foreground => {}
            _ => {
                return Err(SceneError::InvalidSpec(
                    "first ground-plane category must be background".into(),
                ))
            }
        }
        if !(0.0..1.0).contains(&self.object_fraction) {
            return Err(SceneError::InvalidSpec("object_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Deterministic scene for `seed`.
///
/// Budgets are split in proportion to the effective weights: plane categories
/// beyond the first share the ground layer, the rest share
/// `object_fraction · n_voxels`. Stamping stops once a category's budget is
/// reached, truncating the last primitive.
pub fn generate_scene(
    seed: u64,
    spec: &ClassDistributionSpec,
    dims: &GridSpec,
) -> Result<SemanticVoxelGrid, SceneError> {
    spec.validate()?;
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = SemanticVoxelGrid::empty(*dims, spec.category_table());
    let [nx, ny, nz] = dims.dims;
    let weights = spec.effective_weights();
    let planes: Vec<usize> = (0..spec.categories.len())
        .filter(|&i| spec.categories[i].primitive == Primitive::GroundPlane)
        .collect();
    let objects: Vec<usize> = (0..spec.categories.len())
        .filter(|&i| spec.categories[i].primitive != Primitive::GroundPlane)
        .collect();

    let base = planes[0];
    for x in 0..nx {
        for y in 0..ny {
            grid.set(dims.index(x, y, 0), base as u16);
        }
    }
    let layer = (nx * ny) as f64;
    let plane_total: f64 = planes.iter().map(|&i| weights[i]).sum();
    for &cat in &planes[1..] {
        let budget = (layer * weights[cat] / plane_total).round() as usize;
        let mut placed = 0;
        for _ in 0..200 {
            if placed >= budget {
                break;
            }
            let (w, h) = (rng.random_range(2..=6.min(nx)), rng.random_range(2..=6.min(ny)));
            let (x0, y0) = (rng.random_range(0..=nx - w), rng.random_range(0..=ny - h));
            for x in x0..x0 + w {
                for y in y0..y0 + h {
                    let idx = dims.index(x, y, 0);
                    if placed < budget && grid.get(idx) == base as u16 {
                        grid.set(idx, cat as u16);
                        placed += 1;
                    }
                }
            }
        }
    }

    if nz < 2 || objects.is_empty() {
        return Ok(grid);
    }
    let object_total: f64 = objects.iter().map(|&i| weights[i]).sum();
    let total_budget = spec.object_fraction * dims.n_voxels() as f64;
    let mut order = objects.clone();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let center = dims.center_at(0.0);
    let clear2 = spec.ego_clearance * spec.ego_clearance;
    for cat in order {
        let budget = (total_budget * weights[cat] / object_total).round() as usize;
        let mut placed = 0;
        let mut attempts = 0;
        while placed < budget && attempts < 400 {
            attempts += 1;
            let cells = stamp(&spec.categories[cat].primitive, dims, &mut rng);
            for idx in cells {
                if placed >= budget {
                    break;
                }
                let c = dims.voxel_center(idx);
                let d2 = (c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2);
                if d2 < clear2 || grid.get(idx) != EMPTY {
                    continue;
                }
                grid.set(idx, cat as u16);
                placed += 1;
            }
        }
    }
    Ok(grid)
}

/// Voxel indices of one randomly placed primitive resting on the ground.
fn stamp(p: &Primitive, dims: &GridSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let [nx, ny, nz] = dims.dims;
    let top = nz - 1;
    let mut out = Vec::new();
    match *p {
        Primitive::GroundPlane => {}
        Primitive::Box { min, max } => {
            let mut size = [0; 3];
            for a in 0..3 {
                size[a] = rng.random_range(min[a].max(1)..=max[a].max(min[a]).max(1));
            }
            if rng.random_bool(0.5) {
                size.swap(0, 1);
            }
            let sx = size[0].min(nx);
            let sy = size[1].min(ny);
            let sz = size[2].min(top);
            let x0 = rng.random_range(0..=nx - sx);
            let y0 = rng.random_range(0..=ny - sy);
            for x in x0..x0 + sx {
                for y in y0..y0 + sy {
                    for z in 1..=sz {
                        out.push(dims.index(x, y, z));
                    }
                }
            }
        }
        Primitive::Cylinder { radius, height } => {
            let r = rng.random_range(radius.0..=radius.1.max(radius.0));
            let h = rng.random_range(height.0.max(1)..=height.1.max(height.0).max(1)).min(top);
            let cx = rng.random_range(0.0..nx as f64);
            let cy = rng.random_range(0.0..ny as f64);
            let lo = |c: f64| (c - r).floor().max(0.0) as usize;
            for x in lo(cx)..((cx + r).ceil() as usize).min(nx) {
                for y in lo(cy)..((cy + r).ceil() as usize).min(ny) {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        for z in 1..=h {
                            out.push(dims.index(x, y, z));
                        }
                    }
                }
            }
        }
        Primitive::Pole { height } => {
            let h = rng.random_range(height.0.max(1)..=height.1.max(height.0).max(1)).min(top);
            let (x, y) = (rng.random_range(0..nx), rng.random_range(0..ny));
            for z in 1..=h {
                out.push(dims.index(x, y, z));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::class_histogram;

    #[test]
    fn ground_only_spec_fills_bottom_layer() {
        let spec = ClassDistributionSpec {
            categories: vec![CategorySpec {
                name: "ground".into(),
                foreground: false,
                weight: 1.0,
                primitive: Primitive::GroundPlane,
            }],
            long_tail_exponent: 0.0,
            object_fraction: 0.1,
            ego_clearance: 0.0,
        };
        let dims = GridSpec::desk();
        let g = generate_scene(3, &spec, &dims).unwrap();
        for idx in 0..dims.n_voxels() {
            assert_eq!(g.is_occupied(idx), dims.coords(idx)[2] == 0);
        }
    }

    #[test]
    fn zero_categories_rejected() {
        let mut spec = ClassDistributionSpec::default_long_tail(1.0);
        spec.categories.clear();
        assert!(generate_scene(0, &spec, &GridSpec::desk()).is_err());
    }

    #[test]
    fn same_seed_same_grid() {
        let spec = ClassDistributionSpec::default_long_tail(1.0);
        let a = generate_scene(9, &spec, &GridSpec::desk()).unwrap();
        let b = generate_scene(9, &spec, &GridSpec::desk()).unwrap();
        let c = generate_scene(10, &spec, &GridSpec::desk()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ego_clearance_and_free_fraction() {
        let spec = ClassDistributionSpec::default_long_tail(1.0);
        let dims = GridSpec::desk();
        let g = generate_scene(1, &spec, &dims).unwrap();
        let free = g.free_fraction();
        assert!((0.7..0.95).contains(&free), "free fraction {free}");
        for idx in 0..dims.n_voxels() {
            let c = dims.voxel_center(idx);
            if c[0].hypot(c[1]) < spec.ego_clearance && dims.coords(idx)[2] > 0 {
                assert!(!g.is_occupied(idx));
            }
        }
        assert!(class_histogram(&g).iter().all(|&n| n > 0));
    }
}
