//! Named parameters, gradient accumulation and the Adamax optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Arc<Tensor>,
    pub trainable: bool,
    grad: Tensor,
    first_moment: Tensor,
    inf_norm: Tensor,
}

impl Parameter {
    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Per-parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.0.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn merge(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters by dot-separated name, iterated in sorted order.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    seed: u64,
    step: u64,
    has_grads: bool,
}

/// FNV-1a; gives each parameter name its own RNG stream so initial values do
/// not depend on which other parameters exist.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            seed,
            step: 0,
            has_grads: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Deterministic RNG for initializing `name`.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_stream(name));
        rng
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Parameter {
                value: Arc::new(value),
                trainable,
                grad: zeros.clone(),
                first_moment: zeros.clone(),
                inf_norm: zeros,
            },
        );
        Ok(())
    }

    /// Xavier-uniform `[rows × cols]` weight.
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let t = Tensor::xavier(rows, cols, &mut self.rng_for(name));
        self.insert(name, t, true)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::normal(shape, std, &mut self.rng_for(name));
        self.insert(name, t, true)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| p.value.as_ref())
    }

    /// Replaces a parameter value (same shape), e.g. when loading a checkpoint
    /// or perturbing for a finite-difference check.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.scale_assign(0.0);
        }
        self.has_grads = false;
    }

    /// Adds `scale * grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::shape("accumulate", p.grad.shape(), g.shape()));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
        self.has_grads = true;
        Ok(())
    }

    /// One Adamax update on every trainable parameter, then clears gradients.
    ///
    /// `m ← β1·m + (1−β1)·g`, `u ← max(β2·u, |g|)`,
    /// `θ ← θ − lr/(1−β1^t) · m/(u+ε)`.
    pub fn adamax_step(&mut self, lr: f64, cfg: AdamaxConfig) -> Result<()> {
        if !self.has_grads {
            return Err(Error::invalid("adamax_step without accumulated gradients"));
        }
        self.step += 1;
        let bias = 1.0 - cfg.beta1.powi(self.step as i32);
        let step_size = lr / bias;
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let mut value = (*p.value).clone();
            let g = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let u = p.inf_norm.data_mut();
            for (ui, gi) in u.iter_mut().zip(g) {
                *ui = (cfg.beta2 * *ui).max(gi.abs());
            }
            for ((v, mi), ui) in value
                .data_mut()
                .iter_mut()
                .zip(p.first_moment.data())
                .zip(p.inf_norm.data())
            {
                *v -= step_size * mi / (ui + cfg.eps);
            }
            p.value = Arc::new(value);
        }
        self.zero_grad();
        Ok(())
    }

    /// Structural equality of values (used for determinism checks).
    pub fn values_equal(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((n1, p1), (n2, p2))| n1 == n2 && p1.value == p2.value)
    }
}
