//! Explicit view transformation: outer-product lifting and sum pooling.

use crate::scene::{CameraRig, GridSpec};
use crate::tensor::{NdValue, Result, Tape, TensorError, Var};

/// Uniform metric depth discretisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBins {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.count as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.min + (k as f64 + 0.5) * self.width()
    }

    /// Bin containing `d`, clamped to the end bins.
    pub fn bin_of(&self, d: f64) -> usize {
        let k = ((d - self.min) / self.width()).floor();
        k.clamp(0.0, (self.count - 1) as f64) as usize
    }
}

/// World positions of every lifted point, ordered `(camera, bin, row, col)`.
///
/// Feature pixel `(i, j)` stands for image pixel centre
/// `((j + 0.5)·stride, (i + 0.5)·stride)`.
pub fn lifted_positions(rig: &CameraRig, bins: &DepthBins, hf: usize, wf: usize, stride: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(rig.len() * bins.count * hf * wf);
    for cam in &rig.cameras {
        for k in 0..bins.count {
            let d = bins.center(k);
            for i in 0..hf {
                for j in 0..wf {
                    let u = (j as f64 + 0.5) * stride as f64;
                    let v = (i as f64 + 0.5) * stride as f64;
                    out.push(cam.back_project(u, v, d));
                }
            }
        }
    }
    out
}

impl Tape {
    /// `F[C,Ncam,H,W] ⊗ D[B,Ncam,H,W]` → points `[Ncam·B·H·W, C]` with
    /// point `(cam, b, i, j)` carrying `F[:,cam,i,j]·D[b,cam,i,j]`.
    pub fn lift_outer_product(&mut self, f: Var, d: Var) -> Result<Var> {
        const OP: &str = "lift_outer_product";
        let (fs, ds) = (self.shape(f).to_vec(), self.shape(d).to_vec());
        if fs.len() != 4 || ds.len() != 4 || fs[1..] != ds[1..] {
            return Err(TensorError::shape(OP, format!("features {fs:?} vs depth {ds:?}")));
        }
        let (c, ncam, h, w, b) = (fs[0], fs[1], fs[2], fs[3], ds[0]);
        let plane = h * w;
        let n_pts = ncam * b * plane;
        let (fd, dd) = (self.value(f).data(), self.value(d).data());
        let mut out = vec![0.0; n_pts * c];
        for cam in 0..ncam {
            for k in 0..b {
                for p in 0..plane {
                    let row = (cam * b + k) * plane + p;
                    let dv = dd[(k * ncam + cam) * plane + p];
                    for ch in 0..c {
                        out[row * c + ch] = fd[(ch * ncam + cam) * plane + p] * dv;
                    }
                }
            }
        }
        let out = NdValue::new([n_pts, c], out)?;
        Ok(self.push(OP, out, &[f, d], (n_pts * c) as u64, move |ctx| {
            let (fd, dd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gf = vec![0.0; fd.len()];
            let mut gd = vec![0.0; dd.len()];
            for cam in 0..ncam {
                for k in 0..b {
                    for p in 0..plane {
                        let row = (cam * b + k) * plane + p;
                        let di = (k * ncam + cam) * plane + p;
                        let dv = dd[di];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let g = ctx.grad[row * c + ch];
                            let fi = (ch * ncam + cam) * plane + p;
                            gf[fi] += g * dv;
                            acc += g * fd[fi];
                        }
                        gd[di] += acc;
                    }
                }
            }
            vec![Some(gf), Some(gd)]
        }))
    }

    /// Sum-pools point features `[P, C]` at `positions` into `[C, X, Y, Z]`.
    /// Points outside the grid are dropped.
    pub fn voxel_pool(&mut self, features: Var, positions: &[[f64; 3]], grid: &GridSpec) -> Result<Var> {
        const OP: &str = "voxel_pool";
        let (p, c) = match self.shape(features) {
            [p, c] => (*p, *c),
            s => return Err(TensorError::shape(OP, format!("features {s:?}"))),
        };
        if positions.len() != p {
            return Err(TensorError::shape(OP, format!("{} positions for {p} points", positions.len())));
        }
        let target: Vec<Option<usize>> = positions.iter().map(|&x| grid.voxel_of_point(x)).collect();
        let nv = grid.n_voxels();
        let fd = self.value(features).data();
        let mut out = vec![0.0; c * nv];
        for (row, t) in target.iter().enumerate() {
            if let Some(v) = *t {
                for ch in 0..c {
                    out[ch * nv + v] += fd[row * c + ch];
                }
            }
        }
        let [x, y, z] = grid.dims;
        let out = NdValue::new([c, x, y, z], out)?;
        Ok(self.push(OP, out, &[features], (p * c) as u64, move |ctx| {
            let mut g = vec![0.0; p * c];
            for (row, t) in target.iter().enumerate() {
                if let Some(v) = *t {
                    for ch in 0..c {
                        g[row * c + ch] = ctx.grad[ch * nv + v];
                    }
                }
            }
            vec![Some(g)]
        }))
    }
}
