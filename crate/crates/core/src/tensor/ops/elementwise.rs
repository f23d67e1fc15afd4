//! Elementwise maps, leading-axis broadcasting and full reductions.

use crate::tensor::{NdValue, Result, Tape, TensorError, Var};

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    fn map_unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = NdValue::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        let n = out.len() as u64;
        self.push(op, out, &[x], n, move |ctx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.inputs[0].data())
                .zip(ctx.output.data())
                .map(|((&g, &i), &o)| g * df(i, o))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary("relu", x, |v| v.max(0.0), |i, _| if i > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary("sigmoid", x, sigmoid_scalar, |_, o| o * (1.0 - o))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary("scale", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_unary("add_scalar", x, move |v| v + s, |_, _| 1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_values(self.value(a), self.value(b), |x, y| x + y);
        let n = out.len() as u64;
        Ok(self.push("add", out, &[a, b], n, |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_values(self.value(a), self.value(b), |x, y| x - y);
        let n = out.len() as u64;
        Ok(self.push("sub", out, &[a, b], n, |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|g| -g).collect())]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_values(self.value(a), self.value(b), |x, y| x * y);
        let n = out.len() as u64;
        Ok(self.push("mul", out, &[a, b], n, |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect();
            let gb = ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    /// `a[l, ...] + b[...]` where `b` repeats along the leading axis of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() + 1 || sa[1..] != sb[..] {
            return Err(TensorError::shape("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let inner = self.value(b).len();
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(inner) {
            row.iter_mut().zip(&bd).for_each(|(o, v)| *o += v);
        }
        let n = out.len() as u64;
        Ok(self.push("add_broadcast", out, &[a, b], n, move |ctx| {
            let mut gb = vec![0.0; inner];
            for row in ctx.grad.chunks(inner) {
                gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            vec![Some(ctx.grad.to_vec()), Some(gb)]
        }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let n = self.value(x).len();
        self.push("sum", NdValue::scalar(s), &[x], n as u64, move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of scalar vars.
    pub fn linear_combination(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        for &(_, v) in terms {
            if self.value(v).len() != 1 {
                return Err(TensorError::shape("linear_combination", "terms must be scalars"));
            }
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.1).collect();
        let total: f64 = terms
            .iter()
            .map(|&(w, v)| w * self.value(v).item())
            .sum();
        Ok(self.push("linear_combination", NdValue::scalar(total), &vars, terms.len() as u64, move |ctx| {
            weights.iter().map(|w| Some(vec![w * ctx.grad[0]])).collect()
        }))
    }
}

fn zip_values(a: &NdValue, b: &NdValue, f: impl Fn(f64, f64) -> f64) -> NdValue {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NdValue::new(a.shape(), data).expect("same shape")
}
