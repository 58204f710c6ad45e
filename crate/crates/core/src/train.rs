//! Toy SkipGram trainer: sampled-softmax loss and plain SGD on a synthetic
//! Zipf-distributed stream of (center, context) pairs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::batch::BatchIndices;
use crate::error::{contract, Error, Result};
use crate::params::{init_table, EmbedTable, TableRole};
use crate::sampled_loss::loss_and_grads;
use crate::sampler::{draw_candidates_with, CandidateDist};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_classes: usize,
    pub n_embed: usize,
    pub n_batch: usize,
    pub n_sampled: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Contexts are `center + k (mod n)` for `k` uniform in `1..=window`.
    pub window: usize,
    pub log_every: usize,
    /// Uniform init half-width; `None` means [`train_init_scale`].
    pub init_scale: Option<f64>,
}

/// `0.5 / sqrt(n_embed)`. The smaller `0.5 / n_embed` starts both tables so
/// close to the zero saddle of the bilinear logits that a short run barely
/// moves.
pub fn train_init_scale(n_embed: usize) -> f64 {
    0.5 / (n_embed as f64).sqrt()
}

impl TrainConfig {
    /// 2000 classes, 32 dims, batch 128, 32 samples, lr 0.05, 1000 steps, seed 7.
    pub fn toy() -> Self {
        Self {
            n_classes: 2000,
            n_embed: 32,
            n_batch: 128,
            n_sampled: 32,
            steps: 1000,
            lr: 0.05,
            seed: 7,
            window: 2,
            log_every: 50,
            init_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes", self.n_classes),
            ("n_embed", self.n_embed),
            ("n_batch", self.n_batch),
            ("n_sampled", self.n_sampled),
            ("steps", self.steps),
            ("window", self.window),
            ("log_every", self.log_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be at least 1")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(contract(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Entries for steps that are multiples of `log_every`.
    pub log: Vec<LogEntry>,
    /// Loss of every step.
    pub losses: Vec<f64>,
    pub input: EmbedTable<f64>,
    pub target: EmbedTable<f64>,
}

/// Endless stream of (center, context) pairs. Centers follow Zipf(s = 1)
/// over class ids; contexts sit a small random offset after the center.
pub struct ZipfCorpus {
    zipf: Zipf<f64>,
    n_classes: usize,
    window: usize,
}

impl ZipfCorpus {
    pub fn new(n_classes: usize, window: usize) -> Result<Self> {
        if n_classes == 0 || window == 0 {
            return Err(contract(
                "corpus needs at least one class and a positive window",
            ));
        }
        let zipf = Zipf::new(n_classes as f64, 1.0).map_err(|e| contract(format!("zipf: {e}")))?;
        Ok(Self {
            zipf,
            n_classes,
            window,
        })
    }

    pub fn pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let center = (self.zipf.sample(rng) as usize - 1).min(self.n_classes - 1);
        let offset = rng.random_range(1..=self.window);
        (center, (center + offset) % self.n_classes)
    }

    pub fn batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<BatchIndices> {
        let (centers, contexts) = (0..n).map(|_| self.pair(rng)).unzip();
        BatchIndices::new(centers, contexts)
    }
}

/// Per step: draw a batch, draw log-uniform candidates, compute loss and
/// gradients, and take an SGD step on both tables.
pub fn train_skipgram(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg
        .init_scale
        .unwrap_or_else(|| train_init_scale(cfg.n_embed));
    let mut input = init_table::<f64>(
        TableRole::Input,
        cfg.n_classes,
        cfg.n_embed,
        rng.random(),
        scale,
    )?;
    let mut target = init_table::<f64>(
        TableRole::Target,
        cfg.n_classes,
        cfg.n_embed,
        rng.random(),
        scale,
    )?;
    let corpus = ZipfCorpus::new(cfg.n_classes, cfg.window)?;
    let dist = CandidateDist::log_uniform(cfg.n_classes)?;

    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = corpus.batch(cfg.n_batch, &mut rng)?;
        let cand = draw_candidates_with(&dist, cfg.n_sampled, batch.labels(), &mut rng)?;
        let (loss, grads) = loss_and_grads(&input, &target, &batch, &cand)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        input.apply_sgd(&grads.grad_input_embed, cfg.lr)?;
        target.apply_sgd(&grads.grad_target_embed, cfg.lr)?;
        if !(input.is_finite() && target.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }

        losses.push(loss);
        if step % cfg.log_every == 0 {
            log.push(LogEntry { step, loss });
        }
    }
    Ok(TrainOutcome {
        log,
        losses,
        input,
        target,
    })
}

/// One `{"step":..,"loss":..}` object per line.
pub fn emit_train_log(log: &[LogEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    for entry in log {
        let line = serde_json::to_string(entry).expect("log entries always serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}
