//! Named trainable parameters with deterministic initialization and Adam.
//!
//! Initialization draws from a stream seeded by (global seed, parameter
//! name), so the values a parameter receives do not depend on the order in
//! which parameters are first requested.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in [-0.1, 0.1].
    Uniform,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
    seed: u64,
    adam_step: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
            adam_step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns the parameter value, creating and initializing it on first use.
    /// Requesting an existing name with a different shape is a logic error.
    pub fn get_or_init(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> &Matrix {
        if let Some(&i) = self.index.get(name) {
            let p = &self.entries[i];
            assert_eq!(
                p.value.shape(),
                (rows, cols),
                "parameter {name} requested with conflicting shape"
            );
            return &self.entries[i].value;
        }
        let value = match init {
            Init::Const(c) => Matrix::filled(rows, cols, c),
            Init::Uniform => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, name));
                let data = (0..rows * cols).map(|_| rng.gen_range(-0.1..0.1)).collect();
                Matrix::from_vec(rows, cols, data)
            }
        };
        self.insert(name.to_string(), value);
        &self.entries[self.index[name]].value
    }

    /// Registers a parameter with an explicit value (checkpoint loading).
    pub fn insert(&mut self, name: String, value: Matrix) {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let (r, c) = value.shape();
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.entries[i].grad)
    }

    pub fn set_value(&mut self, name: &str, value: Matrix) {
        let i = self.index[name];
        assert_eq!(self.entries[i].value.shape(), value.shape());
        self.entries[i].value = value;
    }

    /// Adds `delta` to one coordinate (finite-difference probing).
    pub fn perturb(&mut self, name: &str, idx: usize, delta: f64) {
        let i = self.index[name];
        self.entries[i].value.data_mut()[idx] += delta;
    }

    pub fn add_grad(&mut self, name: &str, grad: &Matrix) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let p = &mut self.entries[i];
        assert_eq!(p.grad.shape(), grad.shape());
        for (d, s) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *d += s;
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.entries {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Iterates parameters in insertion order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// One Adam update from the accumulated gradients. Weight decay is added
    /// to the gradient (classic L2 penalty) before the moment updates.
    pub fn adam_step(&mut self, lr: f64, weight_decay: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.adam_step += 1;
        let t = self.adam_step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for p in &mut self.entries {
            for i in 0..p.value.len() {
                let g = p.grad.data()[i] + weight_decay * p.value.data()[i];
                let m = BETA1 * p.m.data()[i] + (1.0 - BETA1) * g;
                let v = BETA2 * p.v.data()[i] + (1.0 - BETA2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                p.value.data_mut()[i] -= update;
            }
        }
    }

    /// Snapshot of current values, for best-epoch checkpointing.
    pub fn snapshot_values(&self) -> Vec<(String, Matrix)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn restore_values(&mut self, snapshot: &[(String, Matrix)]) {
        for (name, value) in snapshot {
            self.set_value(name, value.clone());
        }
    }
}

fn mix_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the run seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(7);
        a.get_or_init("w1", 2, 3, Init::Uniform);
        a.get_or_init("w2", 2, 3, Init::Uniform);
        let mut b = ParamStore::new(7);
        b.get_or_init("w2", 2, 3, Init::Uniform);
        b.get_or_init("w1", 2, 3, Init::Uniform);
        assert_eq!(a.get("w1"), b.get("w1"));
        assert_eq!(a.get("w2"), b.get("w2"));
        assert_ne!(a.get("w1"), a.get("w2"));
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = ParamStore::new(0);
        let mut b = ParamStore::new(1);
        a.get_or_init("w", 4, 4, Init::Uniform);
        b.get_or_init("w", 4, 4, Init::Uniform);
        assert_ne!(a.get("w"), b.get("w"));
    }

    #[test]
    fn init_range_respected() {
        let mut s = ParamStore::new(3);
        s.get_or_init("w", 10, 10, Init::Uniform);
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn const_init_and_count() {
        let mut s = ParamStore::new(0);
        s.get_or_init("gain", 1, 8, Init::Const(1.0));
        s.get_or_init("w", 2, 3, Init::Uniform);
        assert_eq!(s.get("gain").unwrap(), &Matrix::filled(1, 8, 1.0));
        assert_eq!(s.count_scalars(), 14);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize (w - 3)^2 elementwise by feeding the exact gradient.
        let mut s = ParamStore::new(0);
        s.get_or_init("w", 1, 1, Init::Const(0.0));
        for _ in 0..2000 {
            let w = s.get("w").unwrap().get(0, 0);
            s.zero_grads();
            s.add_grad("w", &Matrix::from_vec(1, 1, vec![2.0 * (w - 3.0)]));
            s.adam_step(0.05, 0.0);
        }
        let w = s.get("w").unwrap().get(0, 0);
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn snapshot_and_restore_round_trip() {
        let mut s = ParamStore::new(0);
        s.get_or_init("w", 2, 2, Init::Uniform);
        let snap = s.snapshot_values();
        s.add_grad("w", &Matrix::filled(2, 2, 1.0));
        s.adam_step(0.1, 0.0);
        assert_ne!(s.get("w").unwrap(), &snap[0].1);
        s.restore_values(&snap);
        assert_eq!(s.get("w").unwrap(), &snap[0].1);
    }
}
