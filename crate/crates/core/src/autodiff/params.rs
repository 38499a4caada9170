//! Named learnable parameters and the plain-SGD optimizer.

use crate::autodiff::tensor::Tensor2;
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Ordered collection of named parameters. Insertion order is fixed by the
/// model builder, which keeps optimizer state and checkpoints aligned.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> usize {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let idx = self.params.len();
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), idx);
        self.params.push(Param { name, value, grad });
        idx
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// Panics on unknown names; parameter names are crate-internal constants.
    pub fn get(&self, name: &str) -> &Param {
        let idx = self.by_name[name];
        &self.params[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let idx = self.by_name[name];
        &mut self.params[idx]
    }

    pub fn value(&self, name: &str) -> &Tensor2 {
        &self.get(name).value
    }

    pub fn by_idx(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn by_idx_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.params
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<ParamRecord>) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for r in records {
            if set.contains(&r.name) {
                return Err(Error::Format {
                    path: "checkpoint".into(),
                    details: format!("duplicate parameter `{}`", r.name),
                });
            }
            let value = Tensor2::from_vec(r.rows, r.cols, r.data)?;
            set.insert(r.name, value);
        }
        Ok(set)
    }
}

/// On-disk form of one parameter: name, shape, row-major values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Gradient descent with an optional classical momentum term (off by
/// default).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor2>,
}

impl Sgd {
    pub fn new(lr: f64) -> Sgd {
        Sgd {
            lr,
            momentum: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_momentum(lr: f64, momentum: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        if self.momentum > 0.0 && self.velocity.len() != params.len() {
            self.velocity = params
                .iter()
                .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
                .collect();
        }
        for i in 0..params.len() {
            let p = params.by_idx_mut(i);
            if self.momentum > 0.0 {
                let v = &mut self.velocity[i];
                for (vk, gk) in v.data_mut().iter_mut().zip(p.grad.data()) {
                    *vk = self.momentum * *vk + gk;
                }
                for (pk, vk) in p.value.data_mut().iter_mut().zip(v.data()) {
                    *pk -= self.lr * vk;
                }
            } else {
                for (pk, gk) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *pk -= self.lr * gk;
                }
            }
        }
    }
}

/// Uniform init on [-limit, limit].
pub fn uniform_init(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor2::from_vec(rows, cols, data).expect("consistent shape")
}

/// Xavier/Glorot uniform init.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform_init(rows, cols, limit, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut set = ParamSet::new();
        set.insert("a", xavier_init(3, 4, &mut rng));
        set.insert("b", uniform_init(1, 5, 0.1, &mut rng));
        let restored = ParamSet::from_records(set.to_records()).unwrap();
        assert_eq!(restored.len(), 2);
        assert_eq!(restored.value("a"), set.value("a"));
        assert_eq!(restored.value("b"), set.value("b"));
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor2::filled(1, 2, 1.0));
        set.get_mut("w").grad = Tensor2::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let mut opt = Sgd::new(0.1);
        opt.step(&mut set);
        assert_eq!(set.value("w").data(), &[0.95, 1.05]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor2::filled(1, 1, 0.0));
        let mut opt = Sgd::with_momentum(1.0, 0.5);
        for _ in 0..2 {
            set.get_mut("w").grad = Tensor2::filled(1, 1, 1.0);
            opt.step(&mut set);
        }
        // Steps: v=1 -> p=-1; v=1.5 -> p=-2.5.
        assert_eq!(set.value("w").data()[0], -2.5);
    }
}
