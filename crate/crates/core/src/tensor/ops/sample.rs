//! Interpolated sampling of feature volumes and maps, and the deformable
//! attention kernels built on it.
//!
//! Volume sample points are normalised per axis to `[0, 1]`, with 0 at the
//! first grid node and 1 at the last. Image sample points are in feature-map
//! pixel coordinates (`x` = column, `y` = row, node `(i, j)` at `(j, i)`).

use crate::tensor::{NdValue, Result, Tape, TensorError, Var};

/// Which sample points fell inside the volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleValidity(pub Vec<bool>);

impl SampleValidity {
    pub fn count_valid(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }
}

/// One interpolation corner: flat spatial index, weight, d(weight)/d(coord).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner<const D: usize> {
    pub index: usize,
    pub weight: f64,
    pub dweight: [f64; D],
}

fn axis_split(t: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (t.floor() as isize).clamp(0, n as isize - 2) as usize;
    (i0, i0 + 1, t - i0 as f64)
}

/// Eight trilinear corners for a normalised point, or `None` outside `[0,1]³`.
pub(crate) fn trilinear_corners(u: [f64; 3], dims: [usize; 3]) -> Option<[Corner<3>; 8]> {
    if u.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
        return None;
    }
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0.0; 3];
    let mut scale = [0.0; 3];
    for a in 0..3 {
        let s = (dims[a] - 1) as f64;
        let (i0, i1, fr) = axis_split(u[a] * s, dims[a]);
        lo[a] = i0;
        hi[a] = i1;
        f[a] = fr;
        scale[a] = s;
    }
    let mut out = [Corner { index: 0, weight: 0.0, dweight: [0.0; 3] }; 8];
    for (n, corner) in out.iter_mut().enumerate() {
        let bits = [(n >> 2) & 1, (n >> 1) & 1, n & 1];
        let mut idx = [0usize; 3];
        let mut w = [0.0; 3];
        let mut dw = [0.0; 3];
        for a in 0..3 {
            if bits[a] == 1 {
                idx[a] = hi[a];
                w[a] = f[a];
                dw[a] = scale[a];
            } else {
                idx[a] = lo[a];
                w[a] = 1.0 - f[a];
                dw[a] = -scale[a];
            }
        }
        corner.index = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
        corner.weight = w[0] * w[1] * w[2];
        corner.dweight = [dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]];
    }
    Some(out)
}

/// Four bilinear corners in pixel coordinates; off-map corners are dropped.
pub(crate) fn bilinear_corners(x: f64, y: f64, w: usize, h: usize) -> Vec<Corner<2>> {
    let mut out = Vec::with_capacity(4);
    if !x.is_finite() || !y.is_finite() {
        return out;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (dy, wy, dwy) in [(0.0, 1.0 - fy, -1.0), (1.0, fy, 1.0)] {
        for (dx, wx, dwx) in [(0.0, 1.0 - fx, -1.0), (1.0, fx, 1.0)] {
            let (cx, cy) = (x0 + dx, y0 + dy);
            if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                continue;
            }
            out.push(Corner {
                index: cy as usize * w + cx as usize,
                weight: wx * wy,
                dweight: [dwx * wy, wx * dwy],
            });
        }
    }
    out
}

fn volume_shape(tape: &Tape, op: &'static str, v: Var) -> Result<(usize, [usize; 3])> {
    match tape.shape(v) {
        [c, x, y, z] => Ok((*c, [*x, *y, *z])),
        s => Err(TensorError::shape(op, format!("expected [C,X,Y,Z], got {s:?}"))),
    }
}

/// Reference pixel of one query in one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRef {
    pub valid: bool,
    pub x: f64,
    pub y: f64,
}

/// Layout of a deformable attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformLayout {
    pub queries: usize,
    pub heads: usize,
    pub samples: usize,
}

impl Tape {
    /// Samples `vol[C,X,Y,Z]` at `points[P,3]`; returns `[C,P]` and validity.
    pub fn trilinear_sample(&mut self, vol: Var, points: Var) -> Result<(Var, SampleValidity)> {
        let (c, dims) = volume_shape(self, "trilinear_sample", vol)?;
        let p = match self.shape(points) {
            [p, 3] => *p,
            s => return Err(TensorError::shape("trilinear_sample", format!("points {s:?}"))),
        };
        let nsp: usize = dims.iter().product();
        let corners: Vec<Option<[Corner<3>; 8]>> = self
            .value(points)
            .data()
            .chunks(3)
            .map(|u| trilinear_corners([u[0], u[1], u[2]], dims))
            .collect();
        let validity = SampleValidity(corners.iter().map(Option::is_some).collect());
        let vd = self.value(vol).data();
        let mut out = vec![0.0; c * p];
        for (j, cs) in corners.iter().enumerate() {
            let Some(cs) = cs else { continue };
            for ch in 0..c {
                let base = ch * nsp;
                out[ch * p + j] = cs.iter().map(|k| k.weight * vd[base + k.index]).sum();
            }
        }
        let out = NdValue::new([c, p], out)?;
        let var = self.push("trilinear_sample", out, &[vol, points], (16 * c * p) as u64, move |ctx| {
            let vd = ctx.inputs[0].data();
            let mut gv = vec![0.0; vd.len()];
            let mut gp = vec![0.0; p * 3];
            for (j, cs) in corners.iter().enumerate() {
                let Some(cs) = cs else { continue };
                for ch in 0..c {
                    let g = ctx.grad[ch * p + j];
                    let base = ch * nsp;
                    for k in cs {
                        gv[base + k.index] += g * k.weight;
                        for a in 0..3 {
                            gp[j * 3 + a] += g * k.dweight[a] * vd[base + k.index];
                        }
                    }
                }
            }
            vec![Some(gv), Some(gp)]
        });
        Ok((var, validity))
    }

    /// Deformable attention over a volume.
    ///
    /// `value[H*Ch,X,Y,Z]`, `locations` holds `[Nq,H,R,3]` normalised points,
    /// `weights` holds `[Nq,H,R]` softmax weights. Output is `[Nq, H*Ch]`:
    /// each head gathers its channel slice at its own sample points.
    pub fn deformable_attention_3d(
        &mut self,
        value: Var,
        locations: Var,
        weights: Var,
        layout: DeformLayout,
    ) -> Result<Var> {
        const OP: &str = "deformable_attention_3d";
        let (c, dims) = volume_shape(self, OP, value)?;
        let DeformLayout { queries: nq, heads: nh, samples: nr } = layout;
        if c % nh != 0 {
            return Err(TensorError::shape(OP, format!("{c} channels not divisible by {nh} heads")));
        }
        if self.value(locations).len() != nq * nh * nr * 3 || self.value(weights).len() != nq * nh * nr {
            return Err(TensorError::shape(OP, format!("locations/weights do not match {layout:?}")));
        }
        let ch = c / nh;
        let nsp: usize = dims.iter().product();
        let corners: Vec<Option<[Corner<3>; 8]>> = self
            .value(locations)
            .data()
            .chunks(3)
            .map(|u| trilinear_corners([u[0], u[1], u[2]], dims))
            .collect();
        let vd = self.value(value).data();
        let wd = self.value(weights).data();
        let mut out = vec![0.0; nq * c];
        for q in 0..nq {
            for h in 0..nh {
                for r in 0..nr {
                    let s = (q * nh + h) * nr + r;
                    let Some(cs) = &corners[s] else { continue };
                    let a = wd[s];
                    for cc in 0..ch {
                        let base = (h * ch + cc) * nsp;
                        let v: f64 = cs.iter().map(|k| k.weight * vd[base + k.index]).sum();
                        out[q * c + h * ch + cc] += a * v;
                    }
                }
            }
        }
        let out = NdValue::new([nq, c], out)?;
        let flops = (nq * nh * nr * ch * 18) as u64;
        Ok(self.push(OP, out, &[value, locations, weights], flops, move |ctx| {
            let vd = ctx.inputs[0].data();
            let wd = ctx.inputs[2].data();
            let mut gv = vec![0.0; vd.len()];
            let mut gl = vec![0.0; nq * nh * nr * 3];
            let mut gw = vec![0.0; nq * nh * nr];
            for q in 0..nq {
                for h in 0..nh {
                    for r in 0..nr {
                        let s = (q * nh + h) * nr + r;
                        let Some(cs) = &corners[s] else { continue };
                        let a = wd[s];
                        for cc in 0..ch {
                            let g = ctx.grad[q * c + h * ch + cc];
                            let base = (h * ch + cc) * nsp;
                            let mut v = 0.0;
                            for k in cs {
                                let val = vd[base + k.index];
                                v += k.weight * val;
                                gv[base + k.index] += g * a * k.weight;
                                for ax in 0..3 {
                                    gl[s * 3 + ax] += g * a * k.dweight[ax] * val;
                                }
                            }
                            gw[s] += g * v;
                        }
                    }
                }
            }
            vec![Some(gv), Some(gl), Some(gw)]
        }))
    }

    /// Multi-camera deformable attention over image feature maps.
    ///
    /// `value[H*Ch, Ncam, Hf, Wf]`; `refs` holds `Nq*Ncam` reference pixels;
    /// `offsets` holds `[Nq,H,R,2]` pixel offsets (x, y) shared across
    /// cameras; `weights` holds `[Nq,H,R]`. Every (query, camera) pair is
    /// evaluated; invalid pairs are masked out and the result is averaged
    /// over the valid cameras of each query. Queries with no valid camera
    /// produce zeros.
    pub fn deformable_attention_2d(
        &mut self,
        value: Var,
        refs: &[CameraRef],
        offsets: Var,
        weights: Var,
        layout: DeformLayout,
    ) -> Result<Var> {
        const OP: &str = "deformable_attention_2d";
        let (c, [ncam, hf, wf]) = volume_shape(self, OP, value)?;
        let DeformLayout { queries: nq, heads: nh, samples: nr } = layout;
        if c % nh != 0 {
            return Err(TensorError::shape(OP, format!("{c} channels not divisible by {nh} heads")));
        }
        if refs.len() != nq * ncam {
            return Err(TensorError::shape(OP, format!("{} refs for {nq} queries x {ncam} cameras", refs.len())));
        }
        if self.value(offsets).len() != nq * nh * nr * 2 || self.value(weights).len() != nq * nh * nr {
            return Err(TensorError::shape(OP, format!("offsets/weights do not match {layout:?}")));
        }
        let ch = c / nh;
        let plane = hf * wf;
        let refs = refs.to_vec();
        let inv_valid: Vec<f64> = (0..nq)
            .map(|q| {
                let n = refs[q * ncam..(q + 1) * ncam].iter().filter(|r| r.valid).count();
                if n == 0 { 0.0 } else { 1.0 / n as f64 }
            })
            .collect();
        let od = self.value(offsets).data();
        // corners[(q, cam, h, r)]
        let mut corners: Vec<Vec<Corner<2>>> = Vec::with_capacity(nq * ncam * nh * nr);
        for q in 0..nq {
            for cam in 0..ncam {
                let rf = refs[q * ncam + cam];
                for h in 0..nh {
                    for r in 0..nr {
                        let s = (q * nh + h) * nr + r;
                        corners.push(if rf.valid {
                            bilinear_corners(rf.x + od[s * 2], rf.y + od[s * 2 + 1], wf, hf)
                        } else {
                            Vec::new()
                        });
                    }
                }
            }
        }
        let mask: Vec<f64> = (0..nq * ncam)
            .map(|i| if refs[i].valid { inv_valid[i / ncam] } else { 0.0 })
            .collect();
        let vd = self.value(value).data();
        let wd = self.value(weights).data();
        let mut out = vec![0.0; nq * c];
        for q in 0..nq {
            for cam in 0..ncam {
                let m = mask[q * ncam + cam];
                if m == 0.0 {
                    continue;
                }
                for h in 0..nh {
                    for r in 0..nr {
                        let s = (q * nh + h) * nr + r;
                        let cs = &corners[((q * ncam + cam) * nh + h) * nr + r];
                        let a = wd[s] * m;
                        for cc in 0..ch {
                            let base = ((h * ch + cc) * ncam + cam) * plane;
                            let v: f64 = cs.iter().map(|k| k.weight * vd[base + k.index]).sum();
                            out[q * c + h * ch + cc] += a * v;
                        }
                    }
                }
            }
        }
        let out = NdValue::new([nq, c], out)?;
        let flops = (nq * ncam * nh * nr * ch * 10) as u64;
        Ok(self.push(OP, out, &[value, offsets, weights], flops, move |ctx| {
            let vd = ctx.inputs[0].data();
            let wd = ctx.inputs[2].data();
            let mut gv = vec![0.0; vd.len()];
            let mut go = vec![0.0; nq * nh * nr * 2];
            let mut gw = vec![0.0; nq * nh * nr];
            for q in 0..nq {
                for cam in 0..ncam {
                    let m = mask[q * ncam + cam];
                    if m == 0.0 {
                        continue;
                    }
                    for h in 0..nh {
                        for r in 0..nr {
                            let s = (q * nh + h) * nr + r;
                            let cs = &corners[((q * ncam + cam) * nh + h) * nr + r];
                            let a = wd[s] * m;
                            for cc in 0..ch {
                                let g = ctx.grad[q * c + h * ch + cc];
                                let base = ((h * ch + cc) * ncam + cam) * plane;
                                let mut v = 0.0;
                                for k in cs {
                                    let val = vd[base + k.index];
                                    v += k.weight * val;
                                    gv[base + k.index] += g * a * k.weight;
                                    go[s * 2] += g * a * k.dweight[0] * val;
                                    go[s * 2 + 1] += g * a * k.dweight[1] * val;
                                }
                                gw[s] += g * m * v;
                            }
                        }
                    }
                }
            }
            vec![Some(gv), Some(go), Some(gw)]
        }))
    }
}
