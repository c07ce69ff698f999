use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters, their gradient accumulators and trainable flags.
///
/// Entries keep insertion order, which fixes the order of every reduction
/// over parameters (norms, serialisation).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    trainable: Vec<bool>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape())?);
        self.values.push(value);
        self.names.push(name.to_string());
        self.trainable.push(true);
        self.lookup.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Values (read) and gradient accumulators (write) at the same time.
    pub fn split_mut(&mut self) -> (&[Tensor], &mut [Tensor]) {
        (&self.values, &mut self.grads)
    }

    /// Values (read), gradient accumulators (write) and trainable flags.
    pub fn grad_view(&mut self) -> (&[Tensor], &mut [Tensor], &[bool]) {
        (&self.values, &mut self.grads, &self.trainable)
    }

    /// Values (write), gradients (read) and trainable flags, for updates.
    pub fn update_view(&mut self) -> (&mut [Tensor], &[Tensor], &[bool]) {
        (&mut self.values, &self.grads, &self.trainable)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn trainable_flags(&self) -> &[bool] {
        &self.trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (dst, src) in self.values.iter_mut().zip(snapshot) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}
