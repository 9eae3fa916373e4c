//! AdamW and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One decoupled-decay update of every parameter.
pub fn adamw_step<P: Parameterized>(params: &mut P, grads: &P, state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) {
    let mut gs: Vec<&Tensor> = Vec::new();
    grads.visit("", &mut |_, t| gs.push(t));
    if state.m.is_empty() {
        state.m = gs.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut idx = 0;
    params.visit_mut("", &mut |_, p| {
        let g = gs[idx].data();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
        idx += 1;
    });
}

/// `lr_min + (lr0 - lr_min)(1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::join;

    #[derive(Clone, Debug, PartialEq)]
    struct Two(Tensor);

    impl Parameterized for Two {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
            f(&join(prefix, "w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&join(prefix, "w"), &mut self.0);
        }
    }

    fn two(a: f64, b: f64) -> Two {
        Two(Tensor::from_vec(&[2], vec![a, b]).unwrap())
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 30, 1e-3, 1e-6), 1e-3);
        assert!((cosine_lr(30, 30, 1e-3, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(15, 30, 1e-3, 1e-6) - 5.005e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=30).map(|t| cosine_lr(t, 30, 1e-3, 1e-6)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_grad_decays_only() {
        let mut p = two(2.0, -4.0);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &two(0.0, 0.0), &mut AdamWState::new(), 0.1, &cfg);
        assert!((p.0.data()[0] - 2.0 * (1.0 - 0.1 * 1e-2)).abs() < 1e-15);
        assert!((p.0.data()[1] + 4.0 * (1.0 - 0.1 * 1e-2)).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = two(2.0, -4.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new();
        for _ in 0..3 {
            adamw_step(&mut p, &two(0.0, 0.0), &mut st, 0.1, &cfg);
        }
        assert_eq!(p, two(2.0, -4.0));
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = two(1.0, 1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &two(0.3, -7.0), &mut AdamWState::new(), 1e-3, &cfg);
        assert!((p.0.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p.0.data()[1] - (1.0 + 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn no_decay_matches_plain_adam() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = two(0.5, -0.25);
        let mut st = AdamWState::new();
        let (mut m, mut v, mut w) = (0.0, 0.0, 0.5);
        for (k, g) in [0.1, -0.2, 0.05].into_iter().enumerate() {
            adamw_step(&mut p, &two(g, 0.0), &mut st, 0.01, &cfg);
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            let t = k as i32 + 1;
            w -= 0.01 * (m / (1.0 - 0.9f64.powi(t)) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8) + 0.0);
            assert_eq!(p.0.data()[0], w);
        }
    }
}
