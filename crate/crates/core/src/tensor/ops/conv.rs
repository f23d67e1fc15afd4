//! 3-D convolution and its transpose via im2col and GEMM.
//!
//! Volumes are `[C, X, Y, Z]`; kernels `[C_out, C_in, kx, ky, kz]` for the
//! forward convolution and `[C_in, C_out, kx, ky, kz]` for the transpose, so
//! the same kernel tensor gives a pair of adjoint linear maps.

use crate::tensor::ops::linalg::{gemm, MatView};
use crate::tensor::{NdValue, Result, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Extra trailing output cells for the transpose only.
    pub output_padding: [usize; 3],
}

impl ConvSpec {
    pub fn cube(k: usize, stride: usize, padding: usize) -> Self {
        Self { kernel: [k; 3], stride: [stride; 3], padding: [padding; 3], output_padding: [0; 3] }
    }

    /// Size-preserving odd cubic kernel.
    pub fn same(k: usize) -> Self {
        Self::cube(k, 1, k / 2)
    }

    pub fn pointwise() -> Self {
        Self::cube(1, 1, 0)
    }

    /// Per-axis kernel and stride, no padding.
    pub fn anisotropic(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { kernel, stride, padding, output_padding: [0; 3] }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    pub fn conv_output_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn transpose_output_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (dims[a] - 1) * self.stride[a] + self.kernel[a] + self.output_padding[a];
            if self.stride[a] == 0 || full <= 2 * self.padding[a] {
                return None;
            }
            out[a] = full - 2 * self.padding[a];
        }
        Some(out)
    }
}

/// Geometry of one convolution: `vol` is the dense side, `cols` the strided side.
#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    vol: [usize; 3],
    cols: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn n_cols(&self) -> usize {
        self.cols.iter().product()
    }

    fn rows(&self) -> usize {
        self.channels * self.spec.kernel_volume()
    }

    /// Calls `f(col_start, vol_start, len, vol_step)` for every in-bounds
    /// run of taps along z: column entries `col_start..col_start+len` read
    /// volume entries `vol_start, vol_start+vol_step, ...`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [kx, ky, kz] = self.spec.kernel;
        let [sx, sy, sz] = self.spec.stride;
        let [px, py, pz] = self.spec.padding;
        let [vx, vy, vz] = self.vol;
        let [cx, cy, cz] = self.cols;
        let nc = self.n_cols();
        for c in 0..self.channels {
            for a in 0..kx {
                for b in 0..ky {
                    for d in 0..kz {
                        let row = ((c * kx + a) * ky + b) * kz + d;
                        let row_base = row * nc;
                        // oz range with 0 <= oz*sz + d - pz < vz
                        let lo = if pz > d { (pz - d).div_ceil(sz) } else { 0 };
                        let hi = if vz + pz > d { (vz + pz - d).div_ceil(sz).min(cz) } else { 0 };
                        if lo >= hi {
                            continue;
                        }
                        for ox in 0..cx {
                            let ix = (ox * sx + a) as isize - px as isize;
                            if ix < 0 || ix >= vx as isize {
                                continue;
                            }
                            for oy in 0..cy {
                                let iy = (oy * sy + b) as isize - py as isize;
                                if iy < 0 || iy >= vy as isize {
                                    continue;
                                }
                                let vbase = ((c * vx + ix as usize) * vy + iy as usize) * vz;
                                let cbase = row_base + (ox * cy + oy) * cz;
                                f(cbase + lo, vbase + lo * sz + d - pz, hi - lo, sz);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, vol: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.rows() * self.n_cols()];
        self.for_each_run(|c0, v0, len, step| {
            if step == 1 {
                col[c0..c0 + len].copy_from_slice(&vol[v0..v0 + len]);
            } else {
                for (i, dst) in col[c0..c0 + len].iter_mut().enumerate() {
                    *dst = vol[v0 + i * step];
                }
            }
        });
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let mut vol = vec![0.0; self.channels * self.vol.iter().product::<usize>()];
        self.for_each_run(|c0, v0, len, step| {
            if step == 1 {
                for (dst, &src) in vol[v0..v0 + len].iter_mut().zip(&col[c0..c0 + len]) {
                    *dst += src;
                }
            } else {
                for (i, &src) in col[c0..c0 + len].iter().enumerate() {
                    vol[v0 + i * step] += src;
                }
            }
        });
        vol
    }
}

fn volume_dims(tape: &Tape, op: &'static str, v: Var) -> Result<(usize, [usize; 3])> {
    match tape.shape(v) {
        [c, x, y, z] => Ok((*c, [*x, *y, *z])),
        s => Err(TensorError::shape(op, format!("expected [C,X,Y,Z], got {s:?}"))),
    }
}

fn kernel_dims(tape: &Tape, op: &'static str, w: Var, spec: &ConvSpec) -> Result<(usize, usize)> {
    match tape.shape(w) {
        [a, b, kx, ky, kz] if [*kx, *ky, *kz] == spec.kernel => Ok((*a, *b)),
        s => Err(TensorError::shape(
            op,
            format!("kernel {s:?} does not match kernel size {:?}", spec.kernel),
        )),
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize) {
    for (row, b) in out.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(grad: &[f64], n: usize) -> Vec<f64> {
    grad.chunks(n).map(|r| r.iter().sum()).collect()
}

impl Tape {
    /// Cross-correlation of `x[C_in,X,Y,Z]` with `w[C_out,C_in,k...]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (cin, dims) = volume_dims(self, "conv3d", x)?;
        let (cout, wcin) = kernel_dims(self, "conv3d", w, &spec)?;
        if wcin != cin {
            return Err(TensorError::shape("conv3d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        let out_dims = spec.conv_output_dims(dims).ok_or_else(|| {
            TensorError::shape("conv3d", format!("non-positive output for {dims:?} with {spec:?}"))
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape("conv3d", "bias must be [C_out]"));
            }
        }
        let geo = Geometry { channels: cin, vol: dims, cols: out_dims, spec };
        let n = geo.n_cols();
        let k = geo.rows();
        let mut out = vec![0.0; cout * n];
        // the unfolded input is kept for the weight gradient
        let cached: Option<Vec<f64>> = if spec.is_pointwise() { None } else { Some(geo.im2col(self.value(x).data())) };
        {
            let col: &[f64] = cached.as_deref().unwrap_or(self.value(x).data());
            gemm(MatView::new(self.value(w).data(), cout, k), MatView::new(col, k, n), &mut out, 0.0);
        }
        let cached = if self.is_inference() { None } else { cached };
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b).data(), n);
        }
        let out = NdValue::new([cout, out_dims[0], out_dims[1], out_dims[2]], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push("conv3d", out, &parents, (cout * n * k) as u64, move |ctx| {
            let wd = ctx.inputs[1].data();
            let col: &[f64] = cached.as_deref().unwrap_or(ctx.inputs[0].data());
            let gv = MatView::new(ctx.grad, cout, n);
            let mut gw = vec![0.0; cout * k];
            gemm(gv, MatView::new(col, k, n).t(), &mut gw, 0.0);
            let mut gcol = vec![0.0; k * n];
            gemm(MatView::new(wd, cout, k).t(), gv, &mut gcol, 0.0);
            let gx = if spec.is_pointwise() { gcol } else { geo.col2im(&gcol) };
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(bias_grad(ctx.grad, n)));
            }
            grads
        }))
    }

    /// Transposed convolution of `x[C_in,...]` with `w[C_in,C_out,k...]`.
    pub fn conv3d_transpose(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (cin, dims) = volume_dims(self, "conv3d_transpose", x)?;
        let (wcin, cout) = kernel_dims(self, "conv3d_transpose", w, &spec)?;
        if wcin != cin {
            return Err(TensorError::shape(
                "conv3d_transpose",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        let out_dims = spec.transpose_output_dims(dims).ok_or_else(|| {
            TensorError::shape("conv3d_transpose", format!("invalid output for {dims:?}"))
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape("conv3d_transpose", "bias must be [C_out]"));
            }
        }
        let geo = Geometry { channels: cout, vol: out_dims, cols: dims, spec };
        let n = geo.n_cols();
        let k = geo.rows();
        let n_out: usize = out_dims.iter().product();
        let mut cols = vec![0.0; k * n];
        gemm(
            MatView::new(self.value(w).data(), cin, k).t(),
            MatView::new(self.value(x).data(), cin, n),
            &mut cols,
            0.0,
        );
        let mut out = if spec.is_pointwise() { cols } else { geo.col2im(&cols) };
        if let Some(b) = bias {
            add_bias(&mut out, self.value(b).data(), n_out);
        }
        let out = NdValue::new([cout, out_dims[0], out_dims[1], out_dims[2]], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push("conv3d_transpose", out, &parents, (cin * n * k) as u64, move |ctx| {
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let gcol_owned;
            let gcol: &[f64] = if spec.is_pointwise() {
                ctx.grad
            } else {
                gcol_owned = geo.im2col(ctx.grad);
                &gcol_owned
            };
            let gcv = MatView::new(gcol, k, n);
            let mut gx = vec![0.0; cin * n];
            gemm(MatView::new(wd, cin, k), gcv, &mut gx, 0.0);
            let mut gw = vec![0.0; cin * k];
            gemm(MatView::new(xd, cin, n), gcv.t(), &mut gw, 0.0);
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(bias_grad(ctx.grad, n_out)));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(c: usize, d: [usize; 3], f: impl FnMut(usize) -> f64) -> NdValue {
        NdValue::from_fn([c, d[0], d[1], d[2]], f)
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut t = Tape::new();
        let x = t.constant(vol(2, [3, 2, 4], |i| i as f64 * 0.5 - 3.0));
        let w = t.constant(NdValue::new([2, 2, 1, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.conv3d(x, w, None, ConvSpec::pointwise()).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let yt = t.conv3d_transpose(x, w, None, ConvSpec::pointwise()).unwrap();
        assert_eq!(t.value(yt), t.value(x));
    }

    #[test]
    fn ones_kernel_on_one_hot_marks_neighbourhood() {
        let dims = [5, 5, 5];
        let hot = (2 * 5 + 2) * 5 + 2;
        let mut t = Tape::new();
        let x = t.constant(vol(1, dims, |i| if i == hot { 1.0 } else { 0.0 }));
        let w = t.constant(NdValue::full([1, 1, 3, 3, 3], 1.0));
        let y = t.conv3d(x, w, None, ConvSpec::same(3)).unwrap();
        let d = t.value(y).data();
        let mut count = 0;
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    let inside = [i, j, k].iter().all(|&c| (1..=3).contains(&c));
                    let v = d[(i * 5 + j) * 5 + k];
                    assert_eq!(v, if inside { 1.0 } else { 0.0 });
                    count += inside as usize;
                }
            }
        }
        assert_eq!(count, 27);
    }

    #[test]
    fn output_dims_follow_floor_rule() {
        let spec = ConvSpec::cube(3, 2, 1);
        assert_eq!(spec.conv_output_dims([32, 32, 8]), Some([16, 16, 4]));
        assert_eq!(ConvSpec::cube(3, 1, 0).conv_output_dims([2, 5, 5]), None);
        let up = ConvSpec::anisotropic([2, 2, 1], [2, 2, 1], [0; 3]);
        assert_eq!(up.transpose_output_dims([8, 8, 8]), Some([16, 16, 8]));
    }

    #[test]
    fn rejects_non_positive_output() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::zeros([1, 2, 2, 2]));
        let w = t.constant(NdValue::zeros([1, 1, 3, 3, 3]));
        assert!(t.conv3d(x, w, None, ConvSpec::cube(3, 1, 0)).is_err());
    }
}
