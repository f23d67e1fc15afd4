//! Reshape, concatenation, slicing and row gathering.

use crate::tensor::{axis_extents, NdValue, Result, Tape, TensorError, Var};

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push("reshape", out, &[x], 0, |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::shape("concat", format!("{first:?} vs {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = NdValue::new(shape, data)?;
        Ok(self.push("concat", out, parts, 0, move |ctx| {
            let mut grads: Vec<Vec<f64>> =
                sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &sz) in grads.iter_mut().zip(&sizes) {
                    g.extend_from_slice(&ctx.grad[off..off + sz * inner]);
                    off += sz * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::shape(
                "slice",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = NdValue::new(out_shape, data)?;
        Ok(self.push("slice", out, &[x], 0, move |ctx| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                g[base..base + len * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Selects rows of a `[n, d]` matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(TensorError::shape("gather_rows", format!("{s:?}"))),
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, bound: n });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let out = NdValue::new([rows.len(), d], data)?;
        let rows = rows.to_vec();
        Ok(self.push("gather_rows", out, &[x], 0, move |ctx| {
            let mut g = vec![0.0; n * d];
            for (i, &r) in rows.iter().enumerate() {
                g[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(&ctx.grad[i * d..(i + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(g)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut t = Tape::new();
        let a = t.constant(NdValue::from_fn([2, 2], |i| i as f64));
        let b = t.constant(NdValue::from_fn([2, 3], |i| 10.0 + i as f64));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 5]);
        assert_eq!(t.value(c).data(), &[0.0, 1.0, 10.0, 11.0, 12.0, 2.0, 3.0, 13.0, 14.0, 15.0]);
        let s = t.slice(c, 1, 2, 3).unwrap();
        assert_eq!(t.value(s), t.value(b));
    }

    #[test]
    fn gather_out_of_range() {
        let mut t = Tape::new();
        let a = t.constant(NdValue::zeros([2, 2]));
        assert!(matches!(t.gather_rows(a, &[2]), Err(TensorError::Index { .. })));
    }
}
