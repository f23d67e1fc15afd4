//! Matrix products backed by a blocked GEMM kernel.

use crate::tensor::{NdValue, Result, Tape, TensorError, Var};

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = beta * c + a * b` for row-major `c` of shape `m x n`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, c: &mut [f64], beta: f64) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: slice lengths cover the index ranges implied by dims/strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(tape: &Tape, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Tape {
    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul", a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul_nt", a, b, true)
    }

    fn matmul_impl(&mut self, op: &'static str, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = matrix_dims(self, op, a)?;
        let (br, bc) = matrix_dims(self, op, b)?;
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::shape(
                op,
                format!("[{m},{k}] x {:?}", self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = MatView::new(self.value(a).data(), m, k);
            let bv = MatView::new(self.value(b).data(), br, bc);
            gemm(av, if b_t { bv.t() } else { bv }, &mut out, 0.0);
        }
        let out = NdValue::new([m, n], out)?;
        Ok(self.push(op, out, &[a, b], (m * n * k) as u64, move |ctx| {
            let av = MatView::new(ctx.inputs[0].data(), m, k);
            let bv = MatView::new(ctx.inputs[1].data(), br, bc);
            let gv = MatView::new(ctx.grad, m, n);
            // dA = dC · Bᵀ (B as used in the forward product)
            let mut ga = vec![0.0; m * k];
            gemm(gv, if b_t { bv } else { bv.t() }, &mut ga, 0.0);
            // dB = Aᵀ · dC, or its transpose when B entered transposed
            let mut gb = vec![0.0; br * bc];
            if b_t {
                gemm(gv.t(), av, &mut gb, 0.0);
            } else {
                gemm(av.t(), gv, &mut gb, 0.0);
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self, "transpose", x)?;
        let out = NdValue::new([c, r], transpose_data(self.value(x).data(), r, c))?;
        Ok(self.push("transpose", out, &[x], 0, move |ctx| {
            vec![Some(transpose_data(ctx.grad, c, r))]
        }))
    }
}

pub(crate) fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let mut t = Tape::new();
        let i = t.constant(NdValue::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = t.constant(NdValue::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn column_product() {
        let mut t = Tape::new();
        let a = t.constant(NdValue::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(NdValue::new([2, 1], vec![0.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn mismatch_is_a_shape_error() {
        let mut t = Tape::new();
        let a = t.constant(NdValue::zeros([2, 3]));
        let b = t.constant(NdValue::zeros([2, 3]));
        assert!(matches!(t.matmul(a, b), Err(TensorError::Shape { .. })));
        assert!(t.matmul_nt(a, b).is_ok());
    }
}
