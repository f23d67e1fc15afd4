//! Softmax family and layer normalisation.

use crate::tensor::{axis_extents, NdValue, Result, Tape, TensorError, Var};

/// Visits every 1-D lane along `axis` as (start offset, stride).
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let (outer, n, inner) = axis_extents(shape, axis);
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * n * inner + i, inner)))
}

impl Tape {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let n = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        if axis + 1 == shape.len() && n > 0 {
            for (o, s) in out.chunks_exact_mut(n).zip(src.chunks_exact(n)) {
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &x) in o.iter_mut().zip(s) {
                    *o = (x - max).exp();
                    sum += *o;
                }
                let inv = 1.0 / sum;
                o.iter_mut().for_each(|v| *v *= inv);
            }
        } else {
            for (start, stride) in lanes(&shape, axis) {
                let max = (0..n).map(|k| src[start + k * stride]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (src[start + k * stride] - max).exp();
                    out[start + k * stride] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[start + k * stride] /= sum;
                }
            }
        }
        let out = NdValue::new(shape.clone(), out)?;
        let flops = 3 * out.len() as u64;
        Ok(self.push("softmax", out, &[x], flops, move |ctx| {
            let y = ctx.output.data();
            let mut g = vec![0.0; y.len()];
            if axis + 1 == shape.len() && n > 0 {
                for ((g, y), gy) in g.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(ctx.grad.chunks_exact(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((g, &y), &gy) in g.iter_mut().zip(y).zip(gy) {
                        *g = y * (gy - dot);
                    }
                }
                return vec![Some(g)];
            }
            for (start, stride) in lanes(&shape, axis) {
                let dot: f64 = (0..n)
                    .map(|k| ctx.grad[start + k * stride] * y[start + k * stride])
                    .sum();
                for k in 0..n {
                    let idx = start + k * stride;
                    g[idx] = y[idx] * (ctx.grad[idx] - dot);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("log_softmax", format!("axis {axis} of {shape:?}")));
        }
        let n = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (start, stride) in lanes(&shape, axis) {
            let max = (0..n).map(|k| src[start + k * stride]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..n).map(|k| (src[start + k * stride] - max).exp()).sum::<f64>().ln();
            for k in 0..n {
                out[start + k * stride] = src[start + k * stride] - lse;
            }
        }
        let out = NdValue::new(shape.clone(), out)?;
        let flops = 3 * out.len() as u64;
        Ok(self.push("log_softmax", out, &[x], flops, move |ctx| {
            let y = ctx.output.data();
            let mut g = vec![0.0; y.len()];
            for (start, stride) in lanes(&shape, axis) {
                let gsum: f64 = (0..n).map(|k| ctx.grad[start + k * stride]).sum();
                for k in 0..n {
                    let idx = start + k * stride;
                    g[idx] = ctx.grad[idx] - y[idx].exp() * gsum;
                }
            }
            vec![Some(g)]
        }))
    }

    /// Normalises each row of `x[n, d]`, then applies `gain[d]` and `bias[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = match self.shape(x) {
            [r, d] => (*r, *d),
            s => return Err(TensorError::shape("layer_norm", format!("{s:?}"))),
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shape("layer_norm", "gain/bias must be [d]"));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let out = NdValue::new([rows, d], out)?;
        Ok(self.push("layer_norm", out, &[x, gain, bias], (8 * rows * d) as u64, move |ctx| {
            let gd = ctx.inputs[1].data();
            let mut gx = vec![0.0; rows * d];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let go = &ctx.grad[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = 0.0;
                let mut sum_dh_xh = 0.0;
                for j in 0..d {
                    gg[j] += go[j] * xh[j];
                    gb[j] += go[j];
                    let dh = go[j] * gd[j];
                    sum_dh += dh;
                    sum_dh_xh += dh * xh[j];
                }
                for j in 0..d {
                    let dh = go[j] * gd[j];
                    gx[r * d + j] =
                        inv_std[r] * (dh - sum_dh / d as f64 - xh[j] * sum_dh_xh / d as f64);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::full([1, 4], 3.7));
        let y = t.softmax(x, 1).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_pair() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::new([2], vec![0.0, 3f64.ln()]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn leading_axis_softmax_sums_to_one() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::from_fn([5, 3, 2], |i| (i as f64 * 0.37).sin() * 4.0));
        let y = t.softmax(x, 0).unwrap();
        let d = t.value(y).data();
        for lane in 0..6 {
            let s: f64 = (0..5).map(|k| d[k * 6 + lane]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
