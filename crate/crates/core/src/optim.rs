//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// One update of every parameter in `store`, then clears the gradients.
    /// Fails before touching anything if a gradient is missing.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let g = p.grad.take().expect("checked above");
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            if m.len() != g.len() {
                return Err(Error::dim(format!("moment buffer for `{name}` no longer matches the parameter")));
            }
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::matrix(1, vals.len(), vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store(&[0.5, -1.5]);
        let mut adam = AdamState::new(1e-3);
        for _ in 0..3 {
            s.zero_grad();
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data, vec![0.5, -1.5]);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut s = store(&[2.0]);
        s.get_mut("w").unwrap().grad = Some(vec![1.0]);
        let mut adam = AdamState::new(1e-4);
        adam.step(&mut s).unwrap();
        let want = 2.0 - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().data[0] - want).abs() < 1e-15);
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store(&[1.0]);
        let err = AdamState::new(1e-3).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store(&[0.3, -0.7, 1.1]);
            let mut adam = AdamState::new(1e-2);
            for k in 0..10 {
                let g: Vec<f64> = s.get("w").unwrap().data.iter().map(|w| 2.0 * w + k as f64 * 0.01).collect();
                s.get_mut("w").unwrap().grad = Some(g);
                adam.step(&mut s).unwrap();
            }
            s.get("w").unwrap().data.clone()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
