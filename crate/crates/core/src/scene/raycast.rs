//! Amanatides–Woo voxel traversal, shared by rendering and visibility.

use super::camera::Vec3;
use super::GridSpec;

/// One crossed voxel with the ray-parameter interval spent inside it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayStep {
    pub voxel: usize,
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Iterator over the voxels crossed by `origin + t·dir`, `t ≥ 0`, in order.
pub struct GridRay<'a> {
    spec: &'a GridSpec,
    cell: [isize; 3],
    step: [isize; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    t: f64,
    t_end: f64,
    done: bool,
}

impl<'a> GridRay<'a> {
    pub fn new(spec: &'a GridSpec, origin: Vec3, dir: Vec3) -> Self {
        let ext = spec.extent();
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let lo = spec.origin[a];
            let hi = lo + ext[a];
            if dir[a].abs() < 1e-300 {
                if origin[a] < lo || origin[a] >= hi {
                    t1 = -1.0;
                }
            } else {
                let (ta, tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        let mut ray = Self {
            spec,
            cell: [0; 3],
            step: [0; 3],
            t_max: [f64::INFINITY; 3],
            t_delta: [f64::INFINITY; 3],
            t: t0,
            t_end: t1,
            done: !(t1 > t0),
        };
        if ray.done {
            return ray;
        }
        let vs = spec.voxel_size;
        // sample the entry point slightly inside to pick the first cell robustly
        let tm = t0 + (t1 - t0).min(vs) * 1e-9;
        for a in 0..3 {
            let p = origin[a] + tm * dir[a];
            let c = ((p - spec.origin[a]) / vs).floor() as isize;
            ray.cell[a] = c.clamp(0, spec.dims[a] as isize - 1);
            if dir[a] > 0.0 {
                ray.step[a] = 1;
                let b = spec.origin[a] + (ray.cell[a] + 1) as f64 * vs;
                ray.t_max[a] = (b - origin[a]) / dir[a];
                ray.t_delta[a] = vs / dir[a];
            } else if dir[a] < 0.0 {
                ray.step[a] = -1;
                let b = spec.origin[a] + ray.cell[a] as f64 * vs;
                ray.t_max[a] = (b - origin[a]) / dir[a];
                ray.t_delta[a] = -vs / dir[a];
            }
        }
        ray
    }
}

impl Iterator for GridRay<'_> {
    type Item = RayStep;

    fn next(&mut self) -> Option<RayStep> {
        if self.done {
            return None;
        }
        let axis = if self.t_max[0] <= self.t_max[1] && self.t_max[0] <= self.t_max[2] {
            0
        } else if self.t_max[1] <= self.t_max[2] {
            1
        } else {
            2
        };
        let t_exit = self.t_max[axis].min(self.t_end);
        let [x, y, z] = self.cell.map(|c| c as usize);
        let out = RayStep { voxel: self.spec.index(x, y, z), t_enter: self.t, t_exit };
        self.t = t_exit;
        self.cell[axis] += self.step[axis];
        self.t_max[axis] += self.t_delta[axis];
        let c = self.cell[axis];
        if c < 0 || c >= self.spec.dims[axis] as isize || self.t >= self.t_end {
            self.done = true;
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec { dims: [4, 3, 2], voxel_size: 1.0, origin: [0.0; 3] }
    }

    #[test]
    fn axis_ray_visits_row_in_order() {
        let s = spec();
        let steps: Vec<_> = GridRay::new(&s, [-1.0, 0.5, 0.5], [1.0, 0.0, 0.0]).collect();
        let cells: Vec<_> = steps.iter().map(|r| s.coords(r.voxel)).collect();
        assert_eq!(cells, vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        assert!((steps[0].t_enter - 1.0).abs() < 1e-12);
        assert!((steps[3].t_exit - 5.0).abs() < 1e-12);
    }

    #[test]
    fn miss_and_reverse_direction() {
        let s = spec();
        assert_eq!(GridRay::new(&s, [-1.0, 5.0, 0.5], [1.0, 0.0, 0.0]).count(), 0);
        assert_eq!(GridRay::new(&s, [-1.0, 0.5, 0.5], [-1.0, 0.0, 0.0]).count(), 0);
        let back: Vec<_> = GridRay::new(&s, [3.5, 2.5, 1.5], [-1.0, 0.0, 0.0])
            .map(|r| s.coords(r.voxel)[0])
            .collect();
        assert_eq!(back, vec![3, 2, 1, 0]);
    }

    #[test]
    fn diagonal_cells_are_face_connected() {
        let s = spec();
        let steps: Vec<_> = GridRay::new(&s, [0.1, 0.2, 0.3], [0.7, 0.5, 0.3]).collect();
        for w in steps.windows(2) {
            let (a, b) = (s.coords(w[0].voxel), s.coords(w[1].voxel));
            let moved: usize = (0..3).map(|i| a[i].abs_diff(b[i])).sum();
            assert_eq!(moved, 1);
            assert!(w[0].t_exit <= w[1].t_exit);
        }
        assert_eq!(s.coords(steps[0].voxel), [0, 0, 0]);
    }
}
