//! Candidate sampling and the log-priors used for prior correction.
//!
//! Candidates are drawn with replacement and shared by the whole batch.
//! Labels are not excluded from the draw, so a class can legitimately show up
//! both as a sample and as a label ("accidental hit"); this is a known bias
//! source of the estimator and is left in on purpose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::{Real, Vector};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistKind {
    /// `P(k) = (ln(k+2) - ln(k+1)) / ln(n+1)`, Zipf-like mass on low ids.
    LogUniform,
    Uniform,
}

/// Sampling distribution `q` over `n_classes` ids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateDist {
    kind: DistKind,
    n_classes: usize,
    log_range: f64,
}

impl CandidateDist {
    pub fn new(kind: DistKind, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(contract("candidate distribution needs at least one class"));
        }
        Ok(Self {
            kind,
            n_classes,
            log_range: ((n_classes + 1) as f64).ln(),
        })
    }

    pub fn log_uniform(n_classes: usize) -> Result<Self> {
        Self::new(DistKind::LogUniform, n_classes)
    }

    pub fn uniform(n_classes: usize) -> Result<Self> {
        Self::new(DistKind::Uniform, n_classes)
    }

    pub fn kind(&self) -> DistKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn prob(&self, class_id: usize) -> Result<f64> {
        if class_id >= self.n_classes {
            return Err(Error::Index {
                id: class_id,
                n: self.n_classes,
            });
        }
        Ok(match self.kind {
            DistKind::Uniform => 1.0 / self.n_classes as f64,
            // ln((k+2)/(k+1)) = ln_1p(1/(k+1)), exact for large k
            DistKind::LogUniform => (1.0 / (class_id + 1) as f64).ln_1p() / self.log_range,
        })
    }

    /// `ln q(class_id)`, always computed as `prob(class_id).ln()`.
    pub fn log_prob(&self, class_id: usize) -> Result<f64> {
        self.prob(class_id).map(f64::ln)
    }

    /// One id by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let id = match self.kind {
            DistKind::Uniform => (u * self.n_classes as f64) as usize,
            // CDF(k) = ln(k+2)/ln(n+1), so floor(exp(u·ln(n+1))) - 1 lands on k
            // with probability P(k).
            DistKind::LogUniform => ((u * self.log_range).exp().floor() as usize).saturating_sub(1),
        };
        id.min(self.n_classes - 1)
    }
}

/// The shared samples plus log-priors for samples and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet<T> {
    pub sample_ids: Vec<usize>,
    pub sample_log_priors: Vector<T>,
    pub label_log_priors: Vector<T>,
}

impl<T: Real> CandidateSet<T> {
    pub fn n_sampled(&self) -> usize {
        self.sample_ids.len()
    }

    /// Adds `c` to every log-prior.
    pub fn shift_priors(&self, c: T) -> Self {
        let shift = |v: &Vector<T>| Vector::new(v.iter().map(|&x| x + c).collect());
        Self {
            sample_ids: self.sample_ids.clone(),
            sample_log_priors: shift(&self.sample_log_priors),
            label_log_priors: shift(&self.label_log_priors),
        }
    }
}

/// Draws `m` candidates with a fresh generator seeded from `seed`.
pub fn draw_candidates<T: Real>(
    dist: &CandidateDist,
    m: usize,
    labels: &[usize],
    seed: u64,
) -> Result<CandidateSet<T>> {
    draw_candidates_with(dist, m, labels, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Draws `m` ids i.i.d. from `dist` (with replacement) and fills in
/// log-priors for them and for `labels`.
pub fn draw_candidates_with<T: Real, R: Rng + ?Sized>(
    dist: &CandidateDist,
    m: usize,
    labels: &[usize],
    rng: &mut R,
) -> Result<CandidateSet<T>> {
    if m == 0 {
        return Err(contract("at least one candidate must be sampled"));
    }
    let label_log_priors = labels
        .iter()
        .map(|&id| dist.log_prob(id).map(T::from_f64))
        .collect::<Result<Vec<_>>>()?;
    let sample_ids: Vec<usize> = (0..m).map(|_| dist.sample(rng)).collect();
    let sample_log_priors = sample_ids
        .iter()
        .map(|&id| dist.log_prob(id).map(T::from_f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateSet {
        sample_ids,
        sample_log_priors: sample_log_priors.into(),
        label_log_priors: label_log_priors.into(),
    })
}

/// Every class except `exclude_label`, ascending, with uniform priors
/// `ln(1/n)`. For a single-example batch this turns the sampled loss into
/// the exact full softmax.
pub fn exhaustive_candidates<T: Real>(n: usize, exclude_label: usize) -> Result<CandidateSet<T>> {
    if n < 2 {
        return Err(contract(format!(
            "exhaustive candidates need at least two classes, got {n}"
        )));
    }
    if exclude_label >= n {
        return Err(Error::Index {
            id: exclude_label,
            n,
        });
    }
    let log_prior = T::from_f64((1.0 / n as f64).ln());
    let sample_ids: Vec<usize> = (0..n).filter(|&c| c != exclude_label).collect();
    Ok(CandidateSet {
        sample_log_priors: Vector::new(vec![log_prior; sample_ids.len()]),
        sample_ids,
        label_log_priors: Vector::new(vec![log_prior]),
    })
}
