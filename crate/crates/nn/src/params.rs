//! Named parameter storage with Adam state.

use std::collections::HashMap;

use crate::error::NnError;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Adam first/second moment, same shape as `value`.
    pub m: Tensor,
    pub v: Tensor,
    /// Non-trainable entries (e.g. frozen scales) are carried through
    /// checkpoints but never updated.
    pub trainable: bool,
}

/// Ordered, named parameter set. Insertion order is stable and determines
/// checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    /// Adam step counter (bias correction state).
    pub adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, NnError> {
        self.add_with(name, value, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, NnError> {
        self.add_with(name, value, false)
    }

    fn add_with(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<usize, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let idx = self.params.len();
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.clone(),
            value,
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            trainable,
        });
        self.by_name.insert(name, idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, NnError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.into()))
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-slot gradient accumulator produced by a backward pass.
#[derive(Debug, Default)]
pub struct Grads {
    by_slot: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, slot: usize, grad: &Tensor) {
        match self.by_slot.get_mut(&slot) {
            Some(t) => t.add_assign(grad),
            None => {
                self.by_slot.insert(slot, grad.clone());
            }
        }
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.by_slot.get(&slot)
    }

    /// Merge another gradient set (e.g. from a second batch element).
    pub fn merge(&mut self, other: &Grads) {
        let mut slots: Vec<_> = other.by_slot.keys().copied().collect();
        slots.sort_unstable();
        for slot in slots {
            self.accumulate(slot, &other.by_slot[&slot]);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.by_slot.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }
}
