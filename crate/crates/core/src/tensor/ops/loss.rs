//! Classification and mask losses.

use super::elementwise::{sigmoid_scalar, softplus};
use crate::tensor::{NdValue, Result, Tape, TensorError, Var};

fn matrix(tape: &Tape, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Tape {
    /// Weighted mean cross-entropy of `logits[N, L]` against integer targets.
    ///
    /// Rows whose target equals `ignore` are skipped. With class weights the
    /// result is `Σ w[t]·nll / Σ w[t]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
        ignore: Option<usize>,
    ) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (n, l) = matrix(self, OP, logits)?;
        if targets.len() != n {
            return Err(TensorError::shape(OP, format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(w) = class_weights {
            if w.len() != l {
                return Err(TensorError::shape(OP, format!("{} class weights for {l} classes", w.len())));
            }
        }
        for &t in targets {
            if Some(t) != ignore && t >= l {
                return Err(TensorError::Index { op: OP, index: t, bound: l });
            }
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; n * l];
        let mut row_w = vec![0.0; n];
        let mut total = 0.0;
        let mut wsum = 0.0;
        for i in 0..n {
            let row = &xd[i * l..(i + 1) * l];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..l {
                probs[i * l + j] = (row[j] - max).exp() / z;
            }
            let t = targets[i];
            if Some(t) == ignore {
                continue;
            }
            let w = class_weights.map_or(1.0, |cw| cw[t]);
            row_w[i] = w;
            wsum += w;
            total += w * (z.ln() + max - row[t]);
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        let targets = targets.to_vec();
        Ok(self.push(OP, NdValue::scalar(loss), &[logits], (4 * n * l) as u64, move |ctx| {
            let mut g = vec![0.0; n * l];
            if wsum > 0.0 {
                let s = ctx.grad[0] / wsum;
                for i in 0..n {
                    if row_w[i] == 0.0 {
                        continue;
                    }
                    for j in 0..l {
                        g[i * l + j] = s * row_w[i] * probs[i * l + j];
                    }
                    g[i * l + targets[i]] -= s * row_w[i];
                }
            }
            vec![Some(g)]
        }))
    }

    /// Per-row binary cross-entropy of mask logits `[M, V]` against `{0,1}`
    /// targets, averaged over voxels with optional voxel weights. Returns `[M]`.
    pub fn bce_with_logits_rows(
        &mut self,
        logits: Var,
        targets: &[f64],
        voxel_weights: Option<&[f64]>,
    ) -> Result<Var> {
        const OP: &str = "bce_with_logits_rows";
        let (m, v) = matrix(self, OP, logits)?;
        check_mask_args(OP, m, v, targets, voxel_weights)?;
        let wsum = voxel_weights.map_or(v as f64, |w| w.iter().sum());
        let xd = self.value(logits).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..v {
                let w = voxel_weights.map_or(1.0, |w| w[j]);
                let x = xd[i * v + j];
                acc += w * (softplus(x) - targets[i * v + j] * x);
            }
            out[i] = if wsum > 0.0 { acc / wsum } else { 0.0 };
        }
        let targets = targets.to_vec();
        let weights = voxel_weights.map(<[f64]>::to_vec);
        Ok(self.push(OP, NdValue::new([m], out)?, &[logits], (6 * m * v) as u64, move |ctx| {
            let xd = ctx.inputs[0].data();
            let mut g = vec![0.0; m * v];
            if wsum > 0.0 {
                for i in 0..m {
                    let s = ctx.grad[i] / wsum;
                    for j in 0..v {
                        let w = weights.as_ref().map_or(1.0, |w| w[j]);
                        let k = i * v + j;
                        g[k] = s * w * (sigmoid_scalar(xd[k]) - targets[k]);
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Per-row dice loss `1 - (2Σmt + 1) / (Σm + Σt + 1)` with `m = σ(logit)`.
    pub fn dice_rows(
        &mut self,
        logits: Var,
        targets: &[f64],
        voxel_weights: Option<&[f64]>,
    ) -> Result<Var> {
        const OP: &str = "dice_rows";
        let (m, v) = matrix(self, OP, logits)?;
        check_mask_args(OP, m, v, targets, voxel_weights)?;
        let xd = self.value(logits).data();
        let mut num = vec![0.0; m];
        let mut den = vec![0.0; m];
        for i in 0..m {
            let (mut inter, mut sm, mut st) = (0.0, 0.0, 0.0);
            for j in 0..v {
                let w = voxel_weights.map_or(1.0, |w| w[j]);
                let p = sigmoid_scalar(xd[i * v + j]);
                let t = targets[i * v + j];
                inter += w * p * t;
                sm += w * p;
                st += w * t;
            }
            num[i] = 2.0 * inter + 1.0;
            den[i] = sm + st + 1.0;
        }
        let out: Vec<f64> = num.iter().zip(&den).map(|(a, b)| 1.0 - a / b).collect();
        let targets = targets.to_vec();
        let weights = voxel_weights.map(<[f64]>::to_vec);
        Ok(self.push(OP, NdValue::new([m], out)?, &[logits], (8 * m * v) as u64, move |ctx| {
            let xd = ctx.inputs[0].data();
            let mut g = vec![0.0; m * v];
            for i in 0..m {
                // d/dp [1 - num/den] = -(2t·den - num) / den²
                let gi = ctx.grad[i];
                let d2 = den[i] * den[i];
                for j in 0..v {
                    let w = weights.as_ref().map_or(1.0, |w| w[j]);
                    let k = i * v + j;
                    let p = sigmoid_scalar(xd[k]);
                    let dp = -(2.0 * targets[k] * den[i] - num[i]) / d2;
                    g[k] = gi * w * dp * p * (1.0 - p);
                }
            }
            vec![Some(g)]
        }))
    }
}

fn check_mask_args(
    op: &'static str,
    m: usize,
    v: usize,
    targets: &[f64],
    voxel_weights: Option<&[f64]>,
) -> Result<()> {
    if targets.len() != m * v {
        return Err(TensorError::shape(op, format!("{} targets for [{m},{v}]", targets.len())));
    }
    if voxel_weights.is_some_and(|w| w.len() != v) {
        return Err(TensorError::shape(op, "voxel weights must have one entry per column"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_logits_give_near_zero_ce() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::new([2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap());
        let l = t.cross_entropy(x, &[0, 2], None, None).unwrap();
        assert!(t.value(l).item() < 1e-20);
    }

    #[test]
    fn uniform_logits_give_log_l() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::zeros([4, 7]));
        let l = t.cross_entropy(x, &[0, 1, 2, 6], None, None).unwrap();
        assert!((t.value(l).item() - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ignore_label_and_bad_target() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::new([2, 2], vec![0.0, 0.0, 9.0, -9.0]).unwrap());
        let l = t.cross_entropy(x, &[99, 0], None, Some(99)).unwrap();
        assert!(t.value(l).item() < 1e-7);
        assert!(matches!(
            t.cross_entropy(x, &[2, 0], None, None),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn dice_of_perfect_mask_is_small() {
        let mut t = Tape::new();
        let x = t.constant(NdValue::new([1, 4], vec![40.0, 40.0, -40.0, -40.0]).unwrap());
        let d = t.dice_rows(x, &[1.0, 1.0, 0.0, 0.0], None).unwrap();
        assert!(t.value(d).item().abs() < 1e-12);
        let b = t.bce_with_logits_rows(x, &[1.0, 1.0, 0.0, 0.0], None).unwrap();
        assert!(t.value(b).item() < 1e-15);
    }
}
