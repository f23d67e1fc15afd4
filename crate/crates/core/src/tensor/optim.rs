//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use super::{NdValue, ParamStore, TensorError};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: DEFAULT_LEARNING_RATE, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moments per parameter and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<NdValue>,
    pub second: Vec<NdValue>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<NdValue> = store.values().iter().map(|v| NdValue::zeros(v.shape())).collect();
        Self { first: zeros.clone(), second: zeros, step: 0 }
    }
}

impl AdamW {
    /// One update of every parameter in `store`.
    ///
    /// Non-finite gradients abort before any parameter is touched.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &[Vec<f64>],
        state: &mut OptimizerState,
    ) -> Result<(), TensorError> {
        if grads.len() != store.len() || state.first.len() != store.len() {
            return Err(TensorError::shape("adamw_step", "gradient/state count mismatch"));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.len() != store.value(id).len() {
                return Err(TensorError::shape("adamw_step", format!("gradient for {}", store.name(id))));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    what: format!("gradient of {}", store.name(id)),
                    detail: format!("element {pos} = {} at step {}", g[pos], state.step + 1),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, value) in store.values_mut().iter_mut().enumerate() {
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn clip_closed_form() {
        let mut g = vec![vec![3.0, 4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1, 0.2]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1, 0.2]]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("w", &[3, 2], super::super::Init::Uniform(1.0), &mut rng);
        let before = store.clone();
        let mut state = OptimizerState::new(&store);
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        opt.step(&mut store, &[vec![0.0; 6]], &mut state).unwrap();
        assert_eq!(store.values(), before.values());
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_scalar_step_by_hand() {
        let mut store = ParamStore::new();
        store.insert("p", NdValue::scalar(1.0));
        let mut state = OptimizerState::new(&store);
        let opt = AdamW { lr: 0.1, weight_decay: 0.5, ..AdamW::default() };
        opt.step(&mut store, &[vec![2.0]], &mut state).unwrap();
        // m̂ = 2, v̂ = 4: p = 1 - 0.1*0.5*1 - 0.1 * 2 / (2 + 1e-8)
        let expected = 1.0 - 0.05 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.values()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut store = ParamStore::new();
        store.insert("p", NdValue::scalar(1.0));
        let mut state = OptimizerState::new(&store);
        let err = AdamW::default().step(&mut store, &[vec![f64::NAN]], &mut state).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert_eq!(store.values()[0].item(), 1.0);
        assert_eq!(state.step, 0);
        assert_eq!(AdamW::default().lr, 2e-4);
    }
}
