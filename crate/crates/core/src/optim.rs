//! Adam with serializable state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamKind, ParamStore};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first: BTreeMap<String, Array>,
    pub second: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut ParamStore, grads: &BTreeMap<String, Array>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            if param.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr · g/|g| (up to eps).
        let mut store = ParamStore::new();
        store.insert("w", Array::from_elem((1, 1, 1, 2), 1.0), ParamKind::Trainable);
        store.insert("frozen", Array::from_elem((1, 1, 1, 1), 1.0), ParamKind::Frozen);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::from_shape_vec((1, 1, 1, 2), vec![3.0, -0.5]).unwrap());
        grads.insert("frozen".to_string(), Array::from_elem((1, 1, 1, 1), 1.0));
        let cfg = AdamConfig::default();
        let mut adam = Adam::new();
        adam.update(&cfg, &mut store, &grads);
        let w = store.value("w");
        assert!((w[[0, 0, 0, 0]] - (1.0 - 2e-4)).abs() < 1e-10);
        assert!((w[[0, 0, 0, 1]] - (1.0 + 2e-4)).abs() < 1e-10);
        assert_eq!(store.value("frozen")[[0, 0, 0, 0]], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Array::from_elem((1, 1, 1, 1), 3.0), ParamKind::Trainable);
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut adam = Adam::new();
        for _ in 0..500 {
            let x = store.value("x")[[0, 0, 0, 0]];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Array::from_elem((1, 1, 1, 1), 2.0 * (x - 1.0)));
            adam.update(&cfg, &mut store, &grads);
        }
        assert!((store.value("x")[[0, 0, 0, 0]] - 1.0).abs() < 1e-2);
    }
}
