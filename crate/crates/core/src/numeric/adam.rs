use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor2::zeros(t.rows(), t.cols()))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update of every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor2]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} grads, {} moments for {} params",
                    grads.len(),
                    self.m.len(),
                    store.len()
                ),
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("grad {:?} for param {:?}", g.shape(), p.shape()),
                ));
            }
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor2::from_rows(&[vec![1.0, -2.0, 0.5]]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut s = store();
        let before = s.clone();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, &[Tensor2::zeros(1, 3)]).unwrap();
        assert_eq!(s, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store();
        let before = s.get(s.id("w").unwrap()).clone();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let g = Tensor2::from_rows(&[vec![0.3, -4.0, 1e-3]]);
        adam.step(&mut s, std::slice::from_ref(&g)).unwrap();
        let after = s.get(s.id("w").unwrap());
        for c in 0..3 {
            // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
            let gc = g.get(0, c);
            let expected = before.get(0, c) - 0.01 * gc / (gc.abs() + 1e-8);
            assert!((after.get(0, c) - expected).abs() < 1e-15);
            assert!((before.get(0, c) - after.get(0, c) - 0.01 * gc.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut s = store();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        assert!(adam.step(&mut s, &[Tensor2::zeros(3, 1)]).is_err());
    }
}
