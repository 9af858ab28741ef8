use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fan-in = rows.
    FanIn,
    Zeros,
    Constant(f64),
    Uniform(f64),
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named, ordered parameter collection.
///
/// Each parameter is initialized from its own generator seeded by
/// `(seed, name)`, so adding or removing one component never shifts the
/// initial values of another.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// FNV-1a mixing of a base seed with a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
        let data: Vec<f64> = match init {
            Init::FanIn => {
                let bound = 1.0 / (rows as f64).sqrt();
                (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::Uniform(bound) => (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect(),
            Init::Zeros => vec![0.0; rows * cols],
            Init::Constant(c) => vec![c; rows * cols],
        };
        self.insert(name, Tensor::matrix(rows, cols, data), true)
    }

    pub fn insert(&mut self, name: &str, mut value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        value.requires_grad = trainable;
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err("ParamStore::set", format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape())));
        }
        let rg = p.value.requires_grad;
        p.value = value;
        p.value.requires_grad = rg;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
        self.params[id.0].value.requires_grad = trainable;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = false;
                p.value.requires_grad = false;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let t = &mut self.params[id.0].value;
        assert_eq!(t.len(), grad.len());
        match &mut t.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => t.grad = Some(grad.to_vec()),
        }
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::new(7);
        let x = a.add("x", 3, 4, Init::FanIn);
        let mut b = ParamStore::new(7);
        b.add("other", 5, 5, Init::FanIn);
        let y = b.add("x", 3, 4, Init::FanIn);
        assert_eq!(a.get(x).data(), b.get(y).data());
    }

    #[test]
    fn fan_in_bounds() {
        let mut s = ParamStore::new(1);
        let w = s.add("w", 16, 8, Init::FanIn);
        assert!(s.get(w).data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn freeze_prefix_marks_params() {
        let mut s = ParamStore::new(0);
        let a = s.add("backbone.w", 2, 2, Init::Zeros);
        let b = s.add("head.w", 2, 2, Init::Zeros);
        s.freeze_prefix("backbone.");
        assert!(!s.is_trainable(a));
        assert!(s.is_trainable(b));
    }
}
