//! Sampled-softmax cross-entropy with a fused forward pass and an explicit
//! analytic backward pass that emits sparse gradient slices.
//!
//! The exact full-softmax loss lives alongside it as a correctness and speed
//! reference, together with a finite-difference checker, a benchmark harness
//! and a toy SkipGram trainer.

pub mod batch;
pub mod bench;
pub mod dense;
pub mod error;
pub mod full_softmax;
pub mod gradcheck;
pub mod params;
pub mod sampled_loss;
pub mod sampler;
pub mod train;

pub use batch::BatchIndices;
pub use dense::{Dtype, Matrix, Real, Vector};
pub use error::{Error, Result};
pub use params::{init_table, EmbedTable, SparseGrad, TableRole};
pub use sampled_loss::{backward, forward, loss_and_grads, ForwardCache, LossGrads};
pub use sampler::{CandidateDist, CandidateSet, DistKind};
