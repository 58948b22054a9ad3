use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`. Parameters with
    /// no entry in `grads` are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let n = p.len();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name).map(Tensor::data);
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total`; steps past
/// `total` stay at `lr_min`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![v]));
        s
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_owned(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = store(1.5);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut p, &grads(0.0), 0.001);
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &grads(2.0), 0.001);
        // m_hat = 2, v_hat = 4, so the step is lr * 2 / (2 + eps).
        let expected = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((p.get("w").unwrap().data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = store(0.3);
            let mut adam = AdamState::new(AdamConfig::default());
            for i in 0..5 {
                adam.step(&mut p, &grads(0.1 * i as f64 - 0.2), 0.01);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.0), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5);
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-5), 1e-5);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(t, 100, 1e-3, 0.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
