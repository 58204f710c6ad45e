//! Central finite-difference checks of the analytic gradients.
//!
//! Candidates are drawn once per problem and held fixed while entries are
//! perturbed: the sampling randomness belongs to the estimator, not to the
//! function being differentiated.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::BatchIndices;
use crate::dense::Matrix;
use crate::error::{contract, Error, Result};
use crate::full_softmax::{full_forward, full_loss_and_grads};
use crate::params::{init_table, TableRole};
use crate::sampled_loss::{forward, loss_and_grads};
use crate::sampler::{draw_candidates_with, CandidateDist, CandidateSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            rtol: 1e-5,
            atol: 1e-8,
        }
    }
}

/// Geometry of a random check problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProblemSize {
    pub n_classes: usize,
    pub n_embed: usize,
    pub n_batch: usize,
    pub n_sampled: usize,
}

impl Default for ProblemSize {
    fn default() -> Self {
        Self {
            n_classes: 20,
            n_embed: 4,
            n_batch: 4,
            n_sampled: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub table: TableRole,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let table = match self.table {
            TableRole::Input => "input",
            TableRole::Target => "target",
        };
        write!(f, "{table}[{}, {}]", self.row, self.col)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Max of `|analytic - numeric| / max(|analytic|, |numeric|, atol)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate that violates the tolerances the most.
    pub worst_coordinate: Option<Coordinate>,
    pub n_checked: usize,
    pub pass: bool,
}

impl GradReport {
    /// Folds two reports over disjoint coordinates into one.
    pub fn merge(self, other: GradReport, cfg: &GradCheckConfig) -> GradReport {
        let (worst, _) = [
            (self.worst_coordinate, self.score(cfg)),
            (other.worst_coordinate, other.score(cfg)),
        ]
        .into_iter()
        .fold((None, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
        let max_rel_err = self.max_rel_err.max(other.max_rel_err);
        let max_abs_err = self.max_abs_err.max(other.max_abs_err);
        GradReport {
            max_rel_err,
            max_abs_err,
            worst_coordinate: worst,
            n_checked: self.n_checked + other.n_checked,
            pass: passes(max_rel_err, max_abs_err, cfg),
        }
    }

    fn score(&self, cfg: &GradCheckConfig) -> f64 {
        violation(self.max_rel_err, self.max_abs_err, cfg)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coordinates, max rel err {:.3e}, max abs err {:.3e}",
            self.n_checked, self.max_rel_err, self.max_abs_err
        )?;
        if let Some(c) = self.worst_coordinate {
            write!(f, ", worst at {c}")?;
        }
        write!(f, ": {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

fn passes(max_rel: f64, max_abs: f64, cfg: &GradCheckConfig) -> bool {
    max_rel < cfg.rtol || max_abs < cfg.atol
}

/// How far a coordinate is outside the tolerances (> 1 means it fails both).
fn violation(rel: f64, abs: f64, cfg: &GradCheckConfig) -> f64 {
    (rel / cfg.rtol).min(abs / cfg.atol)
}

/// `(loss(x + h) - loss(x - h)) / 2h` for entry `(row, col)` of `table`.
/// The entry is restored before returning, including on error.
pub fn numeric_grad<F>(
    mut loss_fn: F,
    table: &mut Matrix<f64>,
    row: usize,
    col: usize,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&Matrix<f64>) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let x = table.get(row, col);
    table.set(row, col, x + h);
    let plus = loss_fn(table);
    table.set(row, col, x - h);
    let minus = loss_fn(table);
    table.set(row, col, x);

    let (plus, minus) = (plus?, minus?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Oracle(format!(
            "non-finite loss at ({row}, {col}) under a perturbation of {h}: {plus} / {minus}"
        )));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Compares analytic gradients of both tables against central differences
/// of `loss`, sweeping every coordinate.
pub fn compare_gradients<F>(
    input: &Matrix<f64>,
    target: &Matrix<f64>,
    analytic_input: &Matrix<f64>,
    analytic_target: &Matrix<f64>,
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&Matrix<f64>, &Matrix<f64>) -> Result<f64>,
{
    if analytic_input.shape() != input.shape() {
        return Err(Error::Shape {
            op: "compare_gradients",
            lhs: input.shape(),
            rhs: analytic_input.shape(),
        });
    }
    if analytic_target.shape() != target.shape() {
        return Err(Error::Shape {
            op: "compare_gradients",
            lhs: target.shape(),
            rhs: analytic_target.shape(),
        });
    }

    let mut u = input.clone();
    let mut v = target.clone();
    let mut acc = Accumulator::new(*cfg);
    for row in 0..u.rows() {
        for col in 0..u.cols() {
            let numeric = numeric_grad(|m| loss(m, &v), &mut u, row, col, cfg.h)?;
            acc.push(
                Coordinate {
                    table: TableRole::Input,
                    row,
                    col,
                },
                analytic_input.get(row, col),
                numeric,
            );
        }
    }
    for row in 0..v.rows() {
        for col in 0..v.cols() {
            let numeric = numeric_grad(|m| loss(&u, m), &mut v, row, col, cfg.h)?;
            acc.push(
                Coordinate {
                    table: TableRole::Target,
                    row,
                    col,
                },
                analytic_target.get(row, col),
                numeric,
            );
        }
    }
    Ok(acc.finish())
}

struct Accumulator {
    cfg: GradCheckConfig,
    max_rel: f64,
    max_abs: f64,
    worst: Option<(Coordinate, f64)>,
    n: usize,
}

impl Accumulator {
    fn new(cfg: GradCheckConfig) -> Self {
        Self {
            cfg,
            max_rel: 0.0,
            max_abs: 0.0,
            worst: None,
            n: 0,
        }
    }

    fn push(&mut self, at: Coordinate, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(self.cfg.atol);
        // NaN analytic values must register as failures
        let (abs, rel) = if abs.is_nan() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            (abs, rel)
        };
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        let score = violation(rel, abs, &self.cfg);
        if self.worst.is_none_or(|(_, s)| score > s) {
            self.worst = Some((at, score));
        }
        self.n += 1;
    }

    fn finish(self) -> GradReport {
        GradReport {
            max_rel_err: self.max_rel,
            max_abs_err: self.max_abs,
            worst_coordinate: self.worst.map(|(c, _)| c),
            n_checked: self.n,
            pass: passes(self.max_rel, self.max_abs, &self.cfg),
        }
    }
}

/// Random tables, batch and frozen candidate set for a gradient check.
#[derive(Clone, Debug)]
pub struct Problem {
    pub input: Matrix<f64>,
    pub target: Matrix<f64>,
    pub batch: BatchIndices,
    pub cand: CandidateSet<f64>,
}

/// Tables are uniform on [-1, 1] so logits are O(1) and every gradient
/// component is well away from round-off.
const PROBLEM_SCALE: f64 = 1.0;

impl Problem {
    pub fn random(size: &ProblemSize, seed: u64) -> Result<Self> {
        let ProblemSize {
            n_classes,
            n_embed,
            n_batch,
            n_sampled,
        } = *size;
        if n_classes == 0 || n_embed == 0 || n_batch == 0 || n_sampled == 0 {
            return Err(contract(format!(
                "every problem dimension must be >= 1, got {size:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = init_table::<f64>(
            TableRole::Input,
            n_classes,
            n_embed,
            rng.random(),
            PROBLEM_SCALE,
        )?;
        let target = init_table::<f64>(
            TableRole::Target,
            n_classes,
            n_embed,
            rng.random(),
            PROBLEM_SCALE,
        )?;
        let inputs = (0..n_batch)
            .map(|_| rng.random_range(0..n_classes))
            .collect();
        let labels: Vec<usize> = (0..n_batch)
            .map(|_| rng.random_range(0..n_classes))
            .collect();
        let dist = CandidateDist::log_uniform(n_classes)?;
        let cand = draw_candidates_with(&dist, n_sampled, &labels, &mut rng)?;
        Ok(Self {
            input: input.into_matrix(),
            target: target.into_matrix(),
            batch: BatchIndices::new(inputs, labels)?,
            cand,
        })
    }

    pub fn sampled_loss(&self, input: &Matrix<f64>, target: &Matrix<f64>) -> Result<f64> {
        forward(input, target, &self.batch, &self.cand).map(|(loss, _)| loss)
    }

    /// Densified analytic gradients `(input, target)` of the sampled loss.
    pub fn sampled_grads(&self) -> Result<(Matrix<f64>, Matrix<f64>)> {
        let (_, g) = loss_and_grads(&self.input, &self.target, &self.batch, &self.cand)?;
        Ok((g.grad_input_embed.densify(), g.grad_target_embed.densify()))
    }

    pub fn full_loss(&self, input: &Matrix<f64>, target: &Matrix<f64>) -> Result<f64> {
        full_forward(input, target, &self.batch).map(|(loss, _)| loss)
    }

    pub fn full_grads(&self) -> Result<(Matrix<f64>, Matrix<f64>)> {
        let (_, g) = full_loss_and_grads(&self.input, &self.target, &self.batch)?;
        Ok((g.grad_input.densify(), g.grad_target))
    }

    /// Checks caller-supplied gradients against the sampled loss.
    pub fn check_sampled_grads(
        &self,
        analytic_input: &Matrix<f64>,
        analytic_target: &Matrix<f64>,
        cfg: &GradCheckConfig,
    ) -> Result<GradReport> {
        compare_gradients(
            &self.input,
            &self.target,
            analytic_input,
            analytic_target,
            |u, v| self.sampled_loss(u, v),
            cfg,
        )
    }
}

pub fn check_sampled(size: &ProblemSize, seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let problem = Problem::random(size, seed)?;
    let (gi, gt) = problem.sampled_grads()?;
    problem.check_sampled_grads(&gi, &gt, cfg)
}

pub fn check_full(size: &ProblemSize, seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let problem = Problem::random(size, seed)?;
    let (gi, gt) = problem.full_grads()?;
    compare_gradients(
        &problem.input,
        &problem.target,
        &gi,
        &gt,
        |u, v| problem.full_loss(u, v),
        cfg,
    )
}
