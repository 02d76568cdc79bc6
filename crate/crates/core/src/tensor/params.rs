//! Named parameter collections.

use super::{Scalar, Tensor};

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, uniquely named map of tensors. Iteration order is insertion
/// order, which keeps optimizers and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterGroup<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParameterGroup<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates across all entries.
    pub fn coord_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Elementwise sum with another group holding the same entries in the
    /// same order (gradient accumulation across batch chunks).
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(other.entries.iter()) {
            debug_assert_eq!(a.name, b.name);
            a.tensor.add_scaled(&b.tensor, T::one());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterGroup<U> {
        ParameterGroup {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}
