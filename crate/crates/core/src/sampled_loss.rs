//! Fused sampled-softmax cross-entropy with an explicit analytic backward.
//!
//! For example `i` with input embedding `u_i`, label `y_i` and the shared
//! samples `s_1..s_m`, the candidate logits are
//!
//! ```text
//! samples_logits[i, j] = <u_i, v_{s_j}> - ln q(s_j)
//! labels_logits[i]     = <u_i, v_{y_i}> - ln q(y_i)
//! Z[i]                 = logsumexp(samples_logits[i, ..], labels_logits[i])
//! loss                 = mean_i(Z[i] - labels_logits[i])
//! ```
//!
//! The backward pass only needs `P[i, j] = exp(samples_logits[i, j] - Z[i]) / B`
//! and its row sums `M[i]`:
//!
//! ```text
//! d/du_i      = sum_j P[i, j] v_{s_j} - M[i] v_{y_i}
//! d/dv_{s_j}  = sum_i P[i, j] u_i
//! d/dv_{y_i}  = -M[i] u_i
//! ```
//!
//! Gradients come back as sparse slices; the target-side slice lists the `m`
//! sample rows first and the `B` label rows after them, and ids may repeat.

use crate::batch::BatchIndices;
use crate::dense::{
    axpy, logsumexp, matmul, matmul_transpose_a, row_dot, row_gather, Matrix, Real, Vector,
};
use crate::error::{contract, Error, Result};
use crate::params::SparseGrad;
use crate::sampler::CandidateSet;

/// Everything the backward pass reuses from the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    labels_logits: Vector<T>,
    samples_logits: Matrix<T>,
    z: Vector<T>,
    inputs_embed: Matrix<T>,
    samples_embed: Matrix<T>,
    labels_embed: Matrix<T>,
    batch_inputs: Vec<usize>,
    batch_labels: Vec<usize>,
    sample_ids: Vec<usize>,
    input_classes: usize,
    target_classes: usize,
}

impl<T: Real> ForwardCache<T> {
    pub fn labels_logits(&self) -> &Vector<T> {
        &self.labels_logits
    }

    pub fn samples_logits(&self) -> &Matrix<T> {
        &self.samples_logits
    }

    /// Per-row logsumexp over the `m + 1` candidate logits.
    pub fn z(&self) -> &Vector<T> {
        &self.z
    }

    pub fn batch_len(&self) -> usize {
        self.batch_inputs.len()
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    /// `P[i, j] = exp(samples_logits[i, j] - Z[i]) / B`.
    pub fn samples_pred(&self) -> Matrix<T> {
        let batch_len = T::from_f64(self.batch_len() as f64);
        let mut pred = self.samples_logits.clone();
        for i in 0..pred.rows() {
            let z = self.z[i];
            for p in pred.row_mut(i) {
                *p = (*p - z).exp() / batch_len;
            }
        }
        pred
    }

    /// Softmax probability of each example's label among its candidates.
    pub fn label_probs(&self) -> Vector<T> {
        self.labels_logits
            .iter()
            .zip(self.z.iter())
            .map(|(&l, &z)| (l - z).exp())
            .collect::<Vec<_>>()
            .into()
    }
}

/// Row sums of `samples_pred`, i.e. `(1 - label prob) / B` per example.
pub fn samples_mass<T: Real>(pred: &Matrix<T>) -> Vector<T> {
    (0..pred.rows())
        .map(|i| pred.row(i).iter().copied().sum())
        .collect::<Vec<T>>()
        .into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads<T> {
    /// `B` rows indexed by the batch input ids.
    pub grad_input_embed: SparseGrad<T>,
    /// `m + B` rows indexed by `sample_ids ++ batch_labels`.
    pub grad_target_embed: SparseGrad<T>,
}

fn check_inputs<T: Real>(
    input_table: &Matrix<T>,
    target_table: &Matrix<T>,
    batch: &BatchIndices,
    cand: &CandidateSet<T>,
) -> Result<()> {
    if input_table.cols() != target_table.cols() {
        return Err(Error::Shape {
            op: "sampled_loss::forward",
            lhs: input_table.shape(),
            rhs: target_table.shape(),
        });
    }
    if cand.sample_ids.is_empty() {
        return Err(contract(
            "sampled loss needs at least one sampled candidate",
        ));
    }
    if cand.sample_log_priors.len() != cand.sample_ids.len() {
        return Err(contract(format!(
            "{} sample log-priors for {} samples",
            cand.sample_log_priors.len(),
            cand.sample_ids.len()
        )));
    }
    if cand.label_log_priors.len() != batch.len() {
        return Err(contract(format!(
            "{} label log-priors for a batch of {}",
            cand.label_log_priors.len(),
            batch.len()
        )));
    }
    Ok(())
}

/// Mean sampled-softmax cross-entropy over the batch, plus the cache the
/// backward pass needs.
pub fn forward<T: Real>(
    input_table: &Matrix<T>,
    target_table: &Matrix<T>,
    batch: &BatchIndices,
    cand: &CandidateSet<T>,
) -> Result<(f64, ForwardCache<T>)> {
    check_inputs(input_table, target_table, batch, cand)?;

    let inputs_embed = row_gather(input_table, batch.inputs())?;
    let samples_embed = row_gather(target_table, &cand.sample_ids)?;
    let labels_embed = row_gather(target_table, batch.labels())?;

    let mut labels_logits = row_dot(&labels_embed, &inputs_embed)?;
    for (l, &lp) in labels_logits.iter_mut().zip(cand.label_log_priors.iter()) {
        *l = *l - lp;
    }

    let mut samples_logits = matmul(&inputs_embed, &samples_embed, true)?;
    for i in 0..samples_logits.rows() {
        for (s, &lp) in samples_logits
            .row_mut(i)
            .iter_mut()
            .zip(cand.sample_log_priors.iter())
        {
            *s = *s - lp;
        }
    }

    // candidates are ordered samples first, label last
    let m = cand.sample_ids.len();
    let mut candidates = vec![T::zero(); m + 1];
    let mut z = Vector::zeros(batch.len());
    let mut total = 0.0;
    for i in 0..batch.len() {
        candidates[..m].copy_from_slice(samples_logits.row(i));
        candidates[m] = labels_logits[i];
        z[i] = logsumexp(&candidates);
        total += (z[i] - labels_logits[i]).as_f64();
    }
    let loss = total / batch.len() as f64;

    let cache = ForwardCache {
        labels_logits,
        samples_logits,
        z,
        inputs_embed,
        samples_embed,
        labels_embed,
        batch_inputs: batch.inputs().to_vec(),
        batch_labels: batch.labels().to_vec(),
        sample_ids: cand.sample_ids.clone(),
        input_classes: input_table.rows(),
        target_classes: target_table.rows(),
    };
    Ok((loss, cache))
}

/// Analytic gradients of the mean loss w.r.t. both embedding tables.
/// Log-priors are constants and receive no gradient.
pub fn backward<T: Real>(cache: &ForwardCache<T>) -> Result<LossGrads<T>> {
    let b = cache.batch_len();
    let d = cache.inputs_embed.cols();
    let pred = cache.samples_pred();
    let mass = samples_mass(&pred);

    let mut grad_input = matmul(&pred, &cache.samples_embed, false)?;
    for i in 0..b {
        axpy(grad_input.row_mut(i), -mass[i], cache.labels_embed.row(i));
    }

    let grad_samples = matmul_transpose_a(&pred, &cache.inputs_embed)?;
    let mut grad_labels = Matrix::zeros(b, d);
    for i in 0..b {
        axpy(grad_labels.row_mut(i), -mass[i], cache.inputs_embed.row(i));
    }
    let grad_target = grad_samples.concat_rows(&grad_labels)?;

    let mut target_indices = Vec::with_capacity(cache.sample_ids.len() + b);
    target_indices.extend_from_slice(&cache.sample_ids);
    target_indices.extend_from_slice(&cache.batch_labels);

    Ok(LossGrads {
        grad_input_embed: SparseGrad::new(
            cache.batch_inputs.clone(),
            grad_input,
            (cache.input_classes, d),
        )?,
        grad_target_embed: SparseGrad::new(target_indices, grad_target, (cache.target_classes, d))?,
    })
}

pub fn loss_and_grads<T: Real>(
    input_table: &Matrix<T>,
    target_table: &Matrix<T>,
    batch: &BatchIndices,
    cand: &CandidateSet<T>,
) -> Result<(f64, LossGrads<T>)> {
    let (loss, cache) = forward(input_table, target_table, batch, cand)?;
    Ok((loss, backward(&cache)?))
}

/// Unfused baseline: ignores any earlier forward pass, re-gathers the
/// embeddings and recomputes logits, `Z` and `P` from scratch before
/// differentiating.
pub fn backward_unfused<T: Real>(
    input_table: &Matrix<T>,
    target_table: &Matrix<T>,
    batch: &BatchIndices,
    cand: &CandidateSet<T>,
) -> Result<LossGrads<T>> {
    let (_, cache) = forward(input_table, target_table, batch, cand)?;
    backward(&cache)
}
