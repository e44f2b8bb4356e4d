//! Black-box auditing of differentially private training.
//!
//! The pipeline: generate synthetic canaries whose labels are independent of
//! their features, train a small ReLU network on them with DP-SGD, guess each
//! canary's membership coin from loss differences on the final model only, and
//! turn the correct-guess count into a statistically valid lower bound on the
//! training run's privacy parameter ε. A single training run audits all m
//! canaries at once. Fault-injection switches produce deliberately broken
//! DP-SGD variants so the auditor's detection power can be demonstrated.
//!
//! Modules follow the pipeline order:
//! - [`linalg`]: dense row-major matrices and the kernels everything runs on
//! - [`nn`]: the 2-layer ReLU network with exact per-sample gradients
//! - [`dp`]: DP-SGD, the RDP accountant, noise calibration, fault injection
//! - [`canary`]: audit/multi-task/toy dataset construction and file I/O
//! - [`audit`]: the auditing games (baseline, self-comparison, multi-task)
//! - [`estimator`]: binomial-tail and Clopper-Pearson ε lower bounds

pub mod audit;
pub mod canary;
pub mod dp;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod nn;

pub use error::{Error, Result};

/// ChaCha stream ids keeping each purpose's randomness disjoint even when
/// one 64-bit seed drives a whole experiment.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const MEMBERSHIP: u64 = 1;
    pub const TRAINING: u64 = 2;
    pub const MISC: u64 = 3;
}
