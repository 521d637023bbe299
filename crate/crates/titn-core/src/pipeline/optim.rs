//! SGD with classic momentum and coupled weight decay, plus the cosine
//! annealing schedule.

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// One update: `v <- momentum*v + grad + weight_decay*param`,
/// `param <- param - lr*v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Optimizer state: one velocity buffer per parameter entry. Entries flagged
/// `decay: false` (norm affines, tokens, positional embeddings) skip weight
/// decay.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.data.len()])
                .collect(),
        }
    }

    /// Apply one step. `grads` are per-entry in registration order; `None`
    /// counts as a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient list length mismatch");
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let wd = if entry.decay { self.weight_decay } else { 0.0 };
            match &grads[i] {
                Some(g) => sgd_step(&mut entry.data, g, &mut self.velocity[i], lr, self.momentum, wd),
                None => {
                    let zeros = vec![0.0; entry.data.len()];
                    sgd_step(
                        &mut entry.data,
                        &zeros,
                        &mut self.velocity[i],
                        lr,
                        self.momentum,
                        wd,
                    );
                }
            }
        }
    }
}

/// Cosine annealing: `lr_min + (lr_max - lr_min)/2 * (1 + cos(pi*t/total))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::InvalidConfig(format!(
            "cosine schedule index {t} outside 0..={total}"
        )));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}
