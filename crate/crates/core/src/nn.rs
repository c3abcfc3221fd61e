//! Named parameter storage, initializers, layer helpers and Adam.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map of trainable tensors. Iteration order is the key order, so
/// every consumer (optimizer, checkpoint writer) sees a stable sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Binds a parameter as a graph leaf.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    /// Conv weight `[co, ci, k, k]` with He-normal init and zero bias.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        ci: usize,
        co: usize,
        k: usize,
        rng: &mut R,
    ) {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        self.insert(format!("{prefix}.w"), Tensor::randn(&[co, ci, k, k], std, rng));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[co]));
    }

    pub fn init_zero_conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize) {
        self.insert(format!("{prefix}.w"), Tensor::zeros(&[co, ci, k, k]));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[co]));
    }

    pub fn init_linear<R: Rng + ?Sized>(&mut self, prefix: &str, fi: usize, fo: usize, rng: &mut R) {
        let std = (1.0 / fi as f64).sqrt();
        self.insert(format!("{prefix}.w"), Tensor::randn(&[fo, fi], std, rng));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fo]));
    }

    pub fn init_zero_linear(&mut self, prefix: &str, fi: usize, fo: usize) {
        self.insert(format!("{prefix}.w"), Tensor::zeros(&[fo, fi]));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fo]));
    }

    pub fn init_norm(&mut self, prefix: &str, c: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    }

    pub fn conv(&self, g: &mut Graph<T>, prefix: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.w"))?;
        let b = self.var(g, &format!("{prefix}.b"))?;
        Ok(g.conv2d(x, w, Some(b), spec))
    }

    pub fn linear(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.w"))?;
        let b = self.var(g, &format!("{prefix}.b"))?;
        Ok(g.linear(x, w, Some(b)))
    }

    pub fn norm(&self, g: &mut Graph<T>, prefix: &str, x: Var, groups: usize) -> Result<Var> {
        let gamma = self.var(g, &format!("{prefix}.gamma"))?;
        let beta = self.var(g, &format!("{prefix}.beta"))?;
        Ok(g.group_norm(x, gamma, beta, groups))
    }
}

/// Largest group count `<= max_groups` that divides `channels`.
pub fn norm_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam with bias correction. Moments are kept in the parameter scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (k, t) in params.iter() {
            m.insert(k.clone(), Tensor::zeros(t.shape()));
            v.insert(k.clone(), Tensor::zeros(t.shape()));
        }
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> f64 {
        let norm = grads
            .values()
            .map(|g| g.sq_norm().to_f64_lossy())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let clip = T::lit(clip);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi * clip;
            }
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                let gc = gi * clip;
                *vi = b2 * *vi + (T::one() - b2) * gc * gc;
            }
            let m = self.m.get(name).expect("moment");
            let v = self.v.get(name).expect("moment");
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= step_size * mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap());
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                clip_norm: 0.0,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = p.var(&mut g, "x").unwrap();
            let l = g.mse_loss(x, &Tensor::zeros(&[2]));
            let grads = g.backward(l).params(&g);
            opt.update(&mut p, &grads);
        }
        assert!(p.get("x").unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn norm_groups_divides() {
        assert_eq!(norm_groups(16, 8), 8);
        assert_eq!(norm_groups(12, 8), 6);
        assert_eq!(norm_groups(2, 8), 2);
    }
}
