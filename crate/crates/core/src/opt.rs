//! Adaptive-moment gradient descent, global-norm gradient clipping, and the
//! plateau tracker behind the learning-rate and stimuli-activation schedules.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::model::ParamStore;

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.param_lens().iter().map(|&n| vec![0.0; n]).collect();
        let v = store.param_lens().iter().map(|&n| vec![0.0; n]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// Apply one update; `grads` is indexed like the store's parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let b1t = 1.0 - powi(self.beta1, self.step);
        let b2t = 1.0 - powi(self.beta2, self.step);
        for (idx, grad) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let values = store.values_mut(idx);
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                values[i] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
    }
}

fn powi(base: f64, exp: u64) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = math::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g {
                *x *= scale;
            }
        }
    }
    norm
}

/// Counts epochs since the tracked quantity last improved.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauTracker {
    pub fn new(patience: usize) -> Self {
        PlateauTracker { patience, best: f64::INFINITY, stale: 0 }
    }

    /// Feed one epoch's value; true when the value has not improved for
    /// `patience` consecutive epochs.
    pub fn observe(&mut self, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}
