use crate::error::{contract, Result};

/// Input ids and label ids for one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    inputs: Vec<usize>,
    labels: Vec<usize>,
}

impl BatchIndices {
    pub fn new(inputs: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(contract(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.is_empty() {
            return Err(contract("batch must hold at least one example"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    /// Always false; empty batches are rejected at construction.
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
