use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

/// Named trainable parameters with one gradient slot each.
///
/// Ordered maps keep iteration (and therefore serialisation and optimizer
/// updates) independent of insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Insert or replace a parameter and reset its gradient slot.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    /// Parameter and gradient pairs, in name order.
    pub(crate) fn pairs_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.params
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, p), g)| (k.as_str(), p, g))
    }

    pub fn set_value(&mut self, name: &str, index: usize, value: f64) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        p.data_mut()[index] = value;
        Ok(())
    }

    /// Dense layer `fan_in -> fan_out` with He-normal weights and zero bias.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let w = self.normal(&format!("{name}.w"), &[fan_in, fan_out], std);
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }

    /// Tensor with `N(0, std^2)` entries drawn from the stream for `name`.
    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = SeedTree::new(self.seed).child("init").child(name).rng();
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    /// Uniform `[-bound, bound]` initialisation.
    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let mut rng = SeedTree::new(self.seed).child("init").child(name).rng();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}
