//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::Grads;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Moment accumulators shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| alloc::vec![0.0; t.len()]).collect();
        AdamState { step: 0, v: m.clone(), m }
    }

    pub fn num_scalars(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }
}

/// One AdamW update at learning rate `lr` over every parameter with a
/// gradient. Decay is applied first (`p -= lr·wd·p`), then the
/// bias-corrected adaptive step. Parameters without a gradient are only decayed.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, &[f64])],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at coordinate {bad}", store.name(*id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let mut grad_of: Vec<Option<&[f64]>> = alloc::vec![None; store.len()];
    for (id, g) in grads {
        grad_of[id.0] = Some(g);
    }
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id).data_mut();
        if cfg.weight_decay != 0.0 {
            let f = 1.0 - lr * cfg.weight_decay;
            p.iter_mut().for_each(|x| *x *= f);
        }
        let Some(g) = grad_of[id.0] else { continue };
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (libm::sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

/// Collects parameter gradients from a backward pass in the form
/// [`adamw_step`] expects.
pub fn param_grads(grads: &Grads) -> Vec<(ParamId, &[f64])> {
    grads.params().filter_map(|(p, g)| g.map(|g| (p, g))).collect()
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`; `step` is clamped to `total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(core::f64::consts::PI * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn decay_only_with_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(alloc::vec![2.0, -1.0]));
        let mut st = AdamState::new(&store);
        let cfg = AdamWConfig::new(3e-4, 0.035);
        let zero = [0.0, 0.0];
        adamw_step(&mut store, &[(id, &zero)], &mut st, &cfg, cfg.lr).unwrap();
        let f = 1.0 - 3e-4 * 0.035;
        assert_eq!(store.get(id).data(), &[2.0 * f, -1.0 * f]);
    }

    #[test]
    fn scalar_step_matches_formula() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(0.5));
        let mut st = AdamState::new(&store);
        let cfg = AdamWConfig::new(3e-4, 0.035);
        let (g1, g2) = (0.2, -0.7);
        adamw_step(&mut store, &[(id, &[g1])], &mut st, &cfg, cfg.lr).unwrap();
        adamw_step(&mut store, &[(id, &[g2])], &mut st, &cfg, cfg.lr).unwrap();
        // Hand evaluation of two steps.
        let (lr, wd, b1, b2, eps) = (3e-4, 0.035, 0.9, 0.999, 1e-8);
        let mut p = 0.5;
        p *= 1.0 - lr * wd;
        let (m1, v1) = ((1.0 - b1) * g1, (1.0 - b2) * g1 * g1);
        p -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        p *= 1.0 - lr * wd;
        let (m2, v2) = (b1 * m1 + (1.0 - b1) * g2, b2 * v1 + (1.0 - b2) * g2 * g2);
        p -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((store.get(id).item() - p).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&store);
        let err = adamw_step(&mut store, &[(id, &[f64::NAN])], &mut st, &AdamWConfig::new(0.1, 0.0), 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(store.get(id).item(), 1.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.0), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5 < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-4) - 5.5e-4).abs() < 1e-15);
    }
}
