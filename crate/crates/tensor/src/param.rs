use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_SET_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_SET_UID.fetch_add(1, Ordering::Relaxed)
}

/// Identifies a parameter across tapes: the owning set plus its slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub set: u64,
    pub index: usize,
}

/// A learnable tensor. The gradient buffer exists iff the parameter is trainable.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    /// Free-form group tag used by optimizers that apply per-group learning rates.
    pub group: u8,
    tensor: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn value(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Split borrow of value and gradient for optimizer updates.
    pub fn value_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        self.tensor.data_and_grad_mut()
    }
}

/// Ordered collection of parameters owned by one network component.
///
/// Cloning a set gives it a fresh identity so tapes never confuse a copy with
/// its source.
#[derive(Debug)]
pub struct ParamSet {
    uid: u64,
    params: Vec<Parameter>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            params: self.params.clone(),
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            params: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> usize {
        self.add_grouped(name, tensor, trainable, 0)
    }

    pub fn add_grouped(
        &mut self,
        name: impl Into<String>,
        mut tensor: Tensor,
        trainable: bool,
        group: u8,
    ) -> usize {
        if trainable {
            tensor.ensure_grad();
        } else {
            tensor.drop_grad();
        }
        self.params.push(Parameter {
            name: name.into(),
            group,
            tensor,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn id(&self, index: usize) -> ParamId {
        ParamId {
            set: self.uid,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar count of trainable parameters, walking every allocation.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
            if trainable {
                p.tensor.ensure_grad();
            } else {
                p.tensor.drop_grad();
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds `grad` into the gradient buffer of the parameter named by `id`.
    /// Returns false when `id` belongs to another set or the parameter is frozen.
    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) -> bool {
        if id.set != self.uid {
            return false;
        }
        let p = &mut self.params[id.index];
        if !p.trainable {
            return false;
        }
        let buf = p.tensor.ensure_grad();
        for (b, g) in buf.iter_mut().zip(grad) {
            *b += g;
        }
        true
    }

    /// Replaces every parameter value with the concatenated `values`.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.params.iter().map(|p| p.numel()).sum();
        if total != values.len() {
            return Err(TensorError::DataLength {
                expected: total,
                actual: values.len(),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value().iter().copied())
            .collect()
    }

    /// Copies values from a set with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(TensorError::DataLength {
                expected: self.params.len(),
                actual: other.params.len(),
            });
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.tensor.dims() != src.tensor.dims() {
                return Err(TensorError::InvalidArgument {
                    op: "copy_values_from",
                    reason: format!("parameter {} has a different shape", dst.name),
                });
            }
            dst.tensor.data_mut().copy_from_slice(src.value());
        }
        Ok(())
    }
}
