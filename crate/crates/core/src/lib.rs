//! Desk-scale weak-to-strong step distillation for flow-matching generators.
//!
//! The crate trains a small velocity MLP with conditional flow matching,
//! distills it into a few-step generator by distribution matching against
//! two views of a shared low-rank branch (a weak view standing in for the
//! real score and a strong view for the fake score), regularizes against
//! ground-truth samples, and refines with a hinge-loss discriminator that
//! taps frozen backbone features. Everything runs in f64 on synthetic 2-D
//! and toy-video datasets with seed-exact reproducibility.
//!
//! Layout mirrors the training pipeline:
//!
//! - [`numerics`]: flat parameter vectors, the MLP with analytic backprop,
//!   Adam, and a finite-difference gradient checker.
//! - [`scheduler`]: the linear-interpolant forward process, velocity
//!   targets, timestep sampling, and the Euler / few-step samplers.
//! - [`lora`]: the shared low-rank branch with weak/strong scaled views.
//! - [`distill`]: distillation losses, the alternating training loop, the
//!   1-step curriculum, and the scale-law verifier.
//! - [`data`]: deterministic synthetic datasets and noise-data pair
//!   synthesis.
//! - [`eval`]: sliced Wasserstein / MMD metrics and the collapse monitor.
//! - [`checkpoint`], [`config`], [`metrics`]: on-disk formats.
//! - [`runner`]: run orchestration behind the `w2sd` CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lora;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod runner;
pub mod scheduler;

pub use error::{Error, Result};

/// A batch of row vectors. All math in this crate is desk-scale, so plain
/// nested vectors keep every operation auditable.
pub type Batch = Vec<Vec<f64>>;
