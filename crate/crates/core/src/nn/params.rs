//! Named parameter storage with per-parameter gradient slots.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::array::{Array, Scalar};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array,
    pub grad: Option<Array>,
    pub trainable: bool,
}

/// Insertion-ordered parameter table. Iteration order is the registration
/// order, which keeps initialization and optimizer sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!(
                "parameter {} already registered",
                name
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
            trainable: true,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Array> {
        self.index
            .get(name)
            .and_then(|&i| self.entries[i].grad.as_ref())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Array) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {}", name)))?;
        let entry = &mut self.entries[i];
        if grad.shape() != entry.value.shape() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: entry.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        match &mut entry.grad {
            Some(existing) => existing.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Glorot-uniform matrix init: +-sqrt(6 / (fan_in + fan_out)).
    pub fn init_matrix(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array::from_fn(&[rows, cols], |_| rng.gen_range(-bound..bound) as Scalar);
        self.register(name, value)
    }

    /// Conv kernels use the receptive-field fan counts.
    pub fn init_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
    ) -> Result<()> {
        let fan_in = c_in * kh * kw;
        let fan_out = c_out * kh * kw;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array::from_fn(&[c_out, c_in, kh, kw], |_| {
            rng.gen_range(-bound..bound) as Scalar
        });
        self.register(name, value)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.register(name, Array::zeros(shape))
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.register(name, Array::full(shape, 1.0))
    }
}
