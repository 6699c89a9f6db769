//! Adam and momentum SGD over a [`ParamStore`].

use std::path::Path;

use defectgan_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{read_tensors, write_tensors, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names = vec!["step".to_string()];
        let mut values = vec![Tensor::scalar(self.step as f64)];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            names.push(format!("m.{i}"));
            values.push(m.clone());
            names.push(format!("v.{i}"));
            values.push(v.clone());
        }
        write_tensors(path, &names, &values)
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let (_, mut values) = read_tensors(path)?;
        if values.len() != 1 + 2 * self.m.len() {
            return Err(Error::Invalid(format!("{}: optimizer state has wrong size", path.display())));
        }
        let rest = values.split_off(1);
        let step = values[0].item() as u64;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (i, pair) in rest.chunks(2).enumerate() {
            if pair[0].shape() != self.m[i].shape() || pair[1].shape() != self.v[i].shape() {
                return Err(Error::Shape(format!("{}: moment {i} shape differs", path.display())));
            }
            m.push(pair[0].clone());
            v.push(pair[1].clone());
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, params: &ParamStore) -> Self {
        Sgd { momentum, velocity: params.values().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for ((p, g), vel) in params.values_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let (p, g, vel) = (p.data_mut(), g.data(), vel.data_mut());
            for i in 0..p.len() {
                vel[i] = self.momentum * vel[i] + g[i];
                p[i] -= lr * vel[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::new(&[2], vec![0.3, -5.0])], 0.1);
        let w = store.values()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1], vec![3.0]));
        let mut adam = Adam::new(AdamConfig { beta1: 0.9, ..Default::default() }, &store);
        for _ in 0..2000 {
            let w = store.values()[0].data()[0];
            adam.step(&mut store, &[Tensor::new(&[1], vec![2.0 * (w - 1.0)])], 0.01);
        }
        assert!((store.values()[0].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn adam_state_roundtrip() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::new(&[3], vec![0.1, 0.2, 0.3])], 0.01);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adam.bin");
        adam.save(&path).unwrap();
        let mut fresh = Adam::new(AdamConfig::default(), &store);
        fresh.load_into(&path).unwrap();
        assert_eq!(fresh, adam);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1], vec![0.0]));
        let mut sgd = Sgd::new(0.9, &store);
        let g = [Tensor::new(&[1], vec![1.0])];
        sgd.step(&mut store, &g, 0.1);
        sgd.step(&mut store, &g, 0.1);
        assert!((store.values()[0].data()[0] + 0.29).abs() < 1e-12);
    }
}
