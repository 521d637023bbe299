//! Flat registry of named learnable buffers.
//!
//! The model owns persistent parameter storage here; each forward pass binds
//! the entries onto a fresh tape as gradient-tracking leaves. The optimizer
//! and the checkpoint format iterate entries in registration order, so that
//! order is part of the model's contract.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Tape, Tensor};

#[derive(Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether weight decay applies (norm affines, tokens and positional
    /// embeddings opt out).
    pub decay: bool,
}

#[derive(Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>, decay: bool) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape/data mismatch"
        );
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            decay,
        });
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        &self.entries[*self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        let idx = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalars across all entries.
    pub fn total_scalars(&self) -> u64 {
        self.entries.iter().map(|e| e.data.len() as u64).sum()
    }

    /// Bind every entry onto `tape`. With `trainable` the leaves accumulate
    /// gradients on backward.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundParams {
        let mut map = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let t = if trainable {
                tape.param(e.data.clone(), &e.shape)
            } else {
                tape.leaf(e.data.clone(), &e.shape)
            }
            .expect("registered shapes are consistent");
            map.insert(e.name.clone(), t);
        }
        BoundParams { map }
    }
}

/// Tape-bound view of a [`ParamSet`].
pub struct BoundParams {
    map: HashMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown bound parameter {name}"))
    }

    /// Gradient of one entry after a backward pass.
    pub fn grad_of(&self, name: &str) -> Option<Vec<f64>> {
        self.map.get(name).and_then(|t| t.grad())
    }
}

/// Normal samples truncated to two standard deviations (resampled outside).
pub fn trunc_normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

pub fn normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn register_and_bind_roundtrip() {
        let mut ps = ParamSet::new();
        ps.register("w", &[2, 3], vec![1.0; 6], true);
        ps.register("b", &[3], vec![0.0; 3], false);
        assert_eq!(ps.total_scalars(), 9);
        let tape = Tape::new();
        let bound = ps.bind(&tape, true);
        assert_eq!(bound.get("w").shape(), &[2, 3]);
        assert!(bound.get("w").requires_grad());
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals = trunc_normal(&mut rng, 10_000, 0.02);
        assert!(vals.iter().all(|v| v.abs() <= 0.04));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.001);
    }
}
