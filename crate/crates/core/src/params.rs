use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named learnable tensors. Iteration is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        t.requires_grad = true;
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every gradient to an all-zero buffer.
    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|t| t.grad = None);
    }

    /// `grad += scale * g` for every entry of `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let t = self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if g.len() != t.numel() {
                return Err(Error::dim(format!("gradient for `{name}` has {} values, parameter {}", g.len(), t.numel())));
            }
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, v) in buf.iter_mut().zip(g) {
                *b += scale * v;
            }
        }
        Ok(())
    }

    /// Affine weight `out×in` drawn from U(-1/√in, 1/√in).
    pub fn init_affine<R: Rng + ?Sized>(&mut self, name: &str, out: usize, inp: usize, rng: &mut R) -> Result<()> {
        self.init_uniform(name, out, inp, inp, rng)
    }

    /// `rows×cols` matrix drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    /// Bias row `1×out` drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn init_bias<R: Rng + ?Sized>(&mut self, name: &str, out: usize, fan_in: usize, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::matrix(1, out, data)?)
    }
}

/// Per-parameter gradient buffers, keyed like a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn insert(&mut self, name: String, g: Vec<f64>) {
        self.0.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += other`, creating missing entries.
    pub fn add(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(mine) => mine.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }
}
