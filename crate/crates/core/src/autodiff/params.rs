use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Named, ordered set of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }

    /// Records every tensor as a parameter leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(slot, t)| tape.param(slot, t.clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
