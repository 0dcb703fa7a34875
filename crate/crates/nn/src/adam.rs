//! Adam with bias correction. Updates iterate parameters in slot order, so a
//! step is deterministic for a given gradient set.

use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy)]
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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// The (0.5, 0.9) betas commonly used for adversarial training.
    pub fn gan(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// One optimizer step over every trainable parameter that received a
/// gradient. Increments the store's shared step counter.
pub fn step(store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) {
    store.adam_t += 1;
    let t = store.adam_t;
    step_with_t(store, grads, cfg, t);
}

/// Adam step with an explicit bias-correction counter, for trainers that
/// update parameter groups on different cadences (e.g. generator vs
/// discriminator).
pub fn step_with_t(store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig, t: u64) {
    let t = t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for slot in 0..store.len() {
        let Some(grad) = grads.get(slot) else {
            continue;
        };
        let p = store.get_mut(slot);
        if !p.trainable {
            continue;
        }
        let g = grad.data();
        let value = p.value.data_mut().as_mut_ptr();
        let m = p.m.data_mut().as_mut_ptr();
        let v = p.v.data_mut().as_mut_ptr();
        // Disjoint fields of the same struct; safe elementwise walk.
        unsafe {
            for i in 0..g.len() {
                let gi = g[i];
                let mi = *m.add(i) * cfg.beta1 + (1.0 - cfg.beta1) * gi;
                let vi = *v.add(i) * cfg.beta2 + (1.0 - cfg.beta2) * gi * gi;
                *m.add(i) = mi;
                *v.add(i) = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *value.add(i) -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}
