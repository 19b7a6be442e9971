//! Named trainable parameters with gradient accumulators and AdamW moments.

use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Tensor,
    pub(crate) grad: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_KEY.fetch_add(1, Ordering::Relaxed)
}

/// Ordered collection of named parameters. Insertion order is the
/// serialization order used by checkpoints.
///
/// Each store carries a process-unique key so a tape that reads parameters
/// from several stores can route adjoints back to the right one. Clones get
/// a fresh key; equality ignores it.
#[derive(Debug)]
pub struct ParamStore {
    pub(crate) key: u64,
    pub(crate) params: Vec<Param>,
    pub(crate) step: u64,
    pub(crate) has_grad: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            key: fresh_key(),
            params: Vec::new(),
            step: 0,
            has_grad: false,
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            key: fresh_key(),
            params: self.params.clone(),
            step: self.step,
            has_grad: self.has_grad,
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.step == other.step && self.has_grad == other.has_grad
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::invalid(
                "param",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        value.check_finite()?;
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// First and second AdamW moments.
    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::mismatch("set_value", p.value.shape(), value.shape()));
        }
        value.check_finite()?;
        p.value = value;
        Ok(())
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != g.shape() {
            return Err(TensorError::mismatch("accumulate_grad", p.grad.shape(), g.shape()));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        self.has_grad = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
        self.has_grad = false;
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Round every parameter to the nearest `f32`, so that saving and
    /// reloading a checkpoint reproduces the in-memory values exactly.
    pub fn quantize_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Hex SHA-256 of names, shapes and `f32`-rounded values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update((v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
