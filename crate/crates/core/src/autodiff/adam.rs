//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
        }
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.values.len()]).collect();
        Ok(Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros })
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Dimension("optimizer state does not match parameters".into()));
        }
        for t in store.tensors() {
            if t.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "adam gradient" });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((t, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if t.grad.len() != t.values.len() {
                continue;
            }
            for i in 0..t.values.len() {
                let g = t.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                t.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::grad;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let p = store.add(vec![2], vec![1.5, -0.5]);
        let mut adam = AdamState::new(&store, 0.1).unwrap();
        store.zero_grad();
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(p).values, vec![1.5, -0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let p = store.add(vec![1], vec![0.0]);
        let mut adam = AdamState::new(&store, 0.1).unwrap();
        store.zero_grad();
        store.get_mut(p).grad[0] = 1.0;
        adam.step(&mut store).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = -lr / (1 + ε)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((store.get(p).values[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add(vec![1], vec![0.0]);
        let mut adam = AdamState::new(&store, 0.05).unwrap();
        store.zero_grad();
        for _ in 0..500 {
            let (_, g) = grad(&store, |g| {
                let x = g.param(p);
                let d = g.add_scalar(x, -3.0);
                let s = g.square(d);
                Ok(g.sum(s))
            })
            .unwrap();
            store.accumulate(&g);
            adam.step(&mut store).unwrap();
        }
        assert!((store.get(p).values[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut store = ParamStore::new();
        let p = store.add(vec![1], vec![0.0]);
        assert!(AdamState::new(&store, 0.0).is_err());
        let mut adam = AdamState::new(&store, 0.1).unwrap();
        store.zero_grad();
        store.get_mut(p).grad[0] = f64::NAN;
        assert!(adam.step(&mut store).is_err());
    }
}
