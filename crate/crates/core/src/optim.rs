//! AdamW, global-norm clipping and cosine annealing.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Decoupled weight decay Adam. Moment buffers are aligned with the store's ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.ids().map(|id| Array2::zeros(store.get(id).raw_dim())).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match optimizer state");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
    }
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Cosine annealing from `base` at step 0 to `floor` at step `horizon`.
pub fn cosine_lr(base: f64, floor: f64, step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return floor;
    }
    let u = step.min(horizon) as f64 / horizon as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * u).cos())
}

/// Elementwise sum of per-sample gradient lists.
pub fn accumulate(acc: &mut Vec<Array2<f64>>, grads: Vec<Array2<f64>>) {
    if acc.is_empty() {
        *acc = grads;
    } else {
        for (a, g) in acc.iter_mut().zip(grads) {
            *a += &g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", array![[1.0, -2.0]]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.update(&mut store, &[array![[0.5, -3.0]]], 0.1);
        // Bias-corrected first step is sign(g) * lr up to eps.
        let p = store.get(id);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", array![[3.0]]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for _ in 0..2000 {
            let g = store.get(id).mapv(|x| 2.0 * (x - 1.0));
            opt.update(&mut store, &[g], 0.01);
        }
        assert!((store.get(id)[[0, 0]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![array![[3.0, 4.0]], array![[0.0]]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![array![[0.3]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.3);
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(1e-4, 0.0, 0, 100), 1e-4);
        assert!(cosine_lr(1e-4, 0.0, 100, 100).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(1e-4, 0.0, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
