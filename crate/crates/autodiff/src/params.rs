use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors owned by a model: trainable weights plus non-trainable
/// buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

/// Batch statistics to fold into running buffers after a training step.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    pub mean_buffer: ParamId,
    pub var_buffer: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// Gradients keyed by parameter, as produced by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert(name.into(), tensor.with_requires_grad(true))
    }

    /// Registers a non-trainable buffer.
    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert(name.into(), tensor.with_requires_grad(false))
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    /// Stores `grads` into each tensor's `grad` slot, replacing old values.
    pub fn set_grads(&mut self, grads: &ParamGrads) {
        for t in &mut self.tensors {
            t.grad = None;
        }
        for (id, g) in &grads.entries {
            self.tensors[id.0].grad = Some(g.clone());
        }
    }

    /// Exponential moving average of batch statistics into running buffers.
    pub fn apply_running_updates(&mut self, updates: &[RunningStatUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.tensors[u.mean_buffer.0].data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.tensors[u.var_buffer.0].data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Overwrites values from `(name, tensor)` records. Every parameter of
    /// this store must be present with a matching shape.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let found: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let src = found.get(name.as_str()).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in checkpoint but {:?} in model",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// SHA-256 of names, shapes and raw values; two stores with equal digests
    /// hold bit-identical parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
