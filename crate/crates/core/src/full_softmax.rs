//! Exact softmax cross-entropy normalized over every class. This is the
//! reference the sampled loss is checked and timed against.

use crate::batch::BatchIndices;
use crate::dense::{matmul, matmul_transpose_a, row_gather, row_logsumexp, Matrix, Real, Vector};
use crate::error::{Error, Result};
use crate::params::SparseGrad;

/// Full logits and normalizers; borrows the target table for the backward.
#[derive(Clone, Debug)]
pub struct FullForwardCache<'a, T> {
    target: &'a Matrix<T>,
    logits: Matrix<T>,
    z_full: Vector<T>,
    inputs_embed: Matrix<T>,
    batch_inputs: Vec<usize>,
    batch_labels: Vec<usize>,
    input_classes: usize,
}

impl<T: Real> FullForwardCache<'_, T> {
    /// `B × n` logits `<u_i, v_c>`.
    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    pub fn z_full(&self) -> &Vector<T> {
        &self.z_full
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullGrads<T> {
    pub grad_input: SparseGrad<T>,
    /// Dense over all `n` target classes.
    pub grad_target: Matrix<T>,
}

pub fn full_forward<'a, T: Real>(
    input_table: &Matrix<T>,
    target_table: &'a Matrix<T>,
    batch: &BatchIndices,
) -> Result<(f64, FullForwardCache<'a, T>)> {
    if input_table.cols() != target_table.cols() {
        return Err(Error::Shape {
            op: "full_softmax::full_forward",
            lhs: input_table.shape(),
            rhs: target_table.shape(),
        });
    }
    let n = target_table.rows();
    if let Some(&id) = batch.labels().iter().find(|&&id| id >= n) {
        return Err(Error::Index { id, n });
    }

    let inputs_embed = row_gather(input_table, batch.inputs())?;
    let logits = matmul(&inputs_embed, target_table, true)?;
    let z_full = row_logsumexp(&logits)?;
    let total: f64 = batch
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &label)| (z_full[i] - logits.get(i, label)).as_f64())
        .sum();

    let cache = FullForwardCache {
        target: target_table,
        logits,
        z_full,
        inputs_embed,
        batch_inputs: batch.inputs().to_vec(),
        batch_labels: batch.labels().to_vec(),
        input_classes: input_table.rows(),
    };
    Ok((total / batch.len() as f64, cache))
}

/// Textbook gradient `(softmax - onehot) / B`, pushed through both tables.
/// Consumes the cache so the logits buffer is reused for the residuals.
pub fn full_backward<T: Real>(cache: FullForwardCache<'_, T>) -> Result<FullGrads<T>> {
    let FullForwardCache {
        target,
        mut logits,
        z_full,
        inputs_embed,
        batch_inputs,
        batch_labels,
        input_classes,
    } = cache;
    let batch_len = T::from_f64(batch_inputs.len() as f64);

    for (i, &label) in batch_labels.iter().enumerate() {
        let z = z_full[i];
        let row = logits.row_mut(i);
        for x in row.iter_mut() {
            *x = (*x - z).exp();
        }
        row[label] = row[label] - T::one();
        for x in row.iter_mut() {
            *x = *x / batch_len;
        }
    }
    let residual = logits;

    let grad_input = matmul(&residual, target, false)?;
    let grad_target = matmul_transpose_a(&residual, &inputs_embed)?;
    Ok(FullGrads {
        grad_input: SparseGrad::new(batch_inputs, grad_input, (input_classes, target.cols()))?,
        grad_target,
    })
}

pub fn full_loss_and_grads<T: Real>(
    input_table: &Matrix<T>,
    target_table: &Matrix<T>,
    batch: &BatchIndices,
) -> Result<(f64, FullGrads<T>)> {
    let (loss, cache) = full_forward(input_table, target_table, batch)?;
    Ok((loss, full_backward(cache)?))
}
