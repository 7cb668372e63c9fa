use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates, one pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. `grads[k]` is `None` for arrays the loss
    /// does not touch (treated as zero gradient).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(
                "gradient count does not match parameter count".into(),
            ));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(crate::nn::ParamId(k)).data_mut();
            for e in 0..p.len() {
                let gv = g.as_ref().map_or(0.0, |g| g.data()[e]);
                m[e] = beta1 * m[e] + (1.0 - beta1) * gv;
                v[e] = beta2 * v[e] + (1.0 - beta2) * gv * gv;
                let mhat = m[e] / c1;
                let vhat = v[e] / c2;
                p[e] -= lr * mhat / (vhat.sqrt() + eps);
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
        s.add("w", Tensor::from_vec(1, 3, vec![0.5, -0.2, 1.0]));
        s
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &s,
        );
        adam.step(
            &mut s,
            &[Some(Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.3]))],
        )
        .unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut s = store();
        let before = s.values()[0].clone();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let g = Tensor::from_vec(1, 3, vec![3.0, -0.01, 250.0]);
        adam.step(&mut s, &[Some(g.clone())]).unwrap();
        for e in 0..3 {
            let moved = s.values()[0].data()[e] - before.data()[e];
            assert!((moved.abs() - 1e-3).abs() < 1e-8);
            assert_eq!(moved.signum(), -g.data()[e].signum());
        }
    }
}
