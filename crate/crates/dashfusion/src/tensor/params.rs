//! Named model parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named tensor, optionally excluded from optimization.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameter store keyed by unique name. Iteration order is the sorted
/// name order, which keeps init, updates, and checkpoints deterministic.
#[derive(Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.map.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                value,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.map
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter: {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter: {name}")))?;
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.map.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn total_len(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    /// Clone with one coordinate of one parameter shifted (finite differences).
    pub fn perturbed(&self, name: &str, index: usize, delta: f64) -> Result<ParamSet> {
        let mut out = self.clone();
        let p = out
            .map
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter: {name}")))?;
        p.value = p.value.perturbed(index, delta);
        Ok(out)
    }

    /// Zero-filled gradient map over the trainable parameters, overlaid with
    /// the tape's gradients. Output keys match the trainable names exactly.
    pub fn full_grad_map(
        &self,
        tape_grads: BTreeMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>> {
        for name in tape_grads.keys() {
            if !self.map.contains_key(name) {
                return Err(Error::KeyMismatch(format!(
                    "gradient for unknown parameter: {name}"
                )));
            }
        }
        let mut out = BTreeMap::new();
        for p in self.map.values().filter(|p| p.trainable) {
            let g = tape_grads
                .get(&p.name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.insert(p.name.clone(), g);
        }
        Ok(out)
    }
}

/// Uniform init in `±sqrt(6 / (fan_in + fan_out))` for projection matrices.
pub fn init_projection(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("projection shape")
}
