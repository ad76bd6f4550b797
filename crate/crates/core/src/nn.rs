//! Named parameter tables, tape bindings, shared layers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered table of named 2-D tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        let tensors = self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.dim()))).collect();
        Self { tensors }
    }

    /// Copies every tensor under `prefix` into a new store, keeping names.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { tensors }
    }

    /// Keeps only the tensors whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let tensors = self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { tensors }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn add_scaled(&mut self, other: &ParamStore, k: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(name) {
                t.scaled_add(k, o);
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.values().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Leaf variables for a [`ParamStore`] placed on a tape.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Binds every tensor in `store`. Trainable tensors become differentiable leaves.
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.var(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn bind_all(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, |_| true)
    }

    pub fn bind_frozen(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, |_| false)
    }

    pub fn merge(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collects parameter gradients into a store; absent gradients are zero.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            out.insert(name.clone(), grads.get_or_zeros(v, tape.shape(v)));
        }
        out
    }
}

pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Inserts `<name>.w` (fan_in×fan_out, scaled normal) and `<name>.b` (zeros).
pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), randn(rng, fan_in, fan_out, std));
    store.insert(format!("{name}.b"), Tensor::zeros((1, fan_out)));
}

pub fn linear(tape: &mut Tape, b: &Bindings, name: &str, x: Var) -> Var {
    let w = b.get(&format!("{name}.w"));
    let bias = b.get(&format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, bias)
}

/// Scaled dot-product attention of `q` (m×d) over keys `k` (n×d) and values `v` (n×e).
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    let d = tape.shape(q).1 as f64;
    let scores = tape.matmul_t(q, k);
    let scaled = tape.scale(scores, 1.0 / d.sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Fixed sinusoidal embedding of a scalar position, 1×dim.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_shape_fn((1, dim), |(_, j)| {
        let i = j % half.max(1);
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        if j < half {
            (position * freq).sin()
        } else {
            (position * freq).cos()
        }
    })
}

/// Sinusoidal positional table for `len` positions.
pub fn positional_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros((len, dim));
    for p in 0..len {
        t.row_mut(p).assign(&sinusoidal_embedding(p as f64, dim).row(0));
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW over a [`ParamStore`]; only names present in the gradient store move.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: ParamStore,
    v: ParamStore,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: ParamStore::new(), v: ParamStore::new(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step_with_lr(params, grads, self.config.lr);
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let Ok(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.dim()));
                self.v.insert(name.clone(), Tensor::zeros(g.dim()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = self.v.get_mut(name).expect("inserted");
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let m = self.m.get(name).expect("inserted");
            let v = self.v.get(name).expect("inserted");
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            let mut grads = ParamStore::new();
            grads.insert("x", params.get("x").unwrap() * 2.0);
            opt.step(&mut params, &grads);
        }
        assert!(params.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_bindings_yield_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_linear(&mut store, &mut rng, "l", 3, 2);
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &store, |n| n.ends_with(".b"));
        let x = tape.constant(Tensor::ones((4, 3)));
        let y = linear(&mut tape, &b, "l", x);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        let g = b.gradients(&tape, &grads);
        assert!(g.get("l.w").unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(g.get("l.b").unwrap(), &Tensor::from_elem((1, 2), 4.0));
    }

    #[test]
    fn sinusoidal_embedding_is_bounded() {
        let e = sinusoidal_embedding(123.0, 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(e.dim(), (1, 16));
    }
}
