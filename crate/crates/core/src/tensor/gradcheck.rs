//! Central finite-difference gradient checking.

use super::{NdValue, Result, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i ‖g_ad - g_fd‖ / max(‖g_ad‖, ‖g_fd‖)` over inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Central difference of a scalar function of one perturbed element.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h` on every element of every input.
pub fn check_gradients(
    inputs: &[NdValue],
    h: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |vals: &[NdValue]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let ad = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut fd = vec![0.0; ad.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        let diff = norm(ad.iter().zip(&fd).map(|(a, b)| a - b));
        let scale = norm(ad.iter().copied()).max(norm(fd.iter().copied()));
        per_input.push(if scale > 1e-300 { diff / scale } else { diff });
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, per_input })
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}
