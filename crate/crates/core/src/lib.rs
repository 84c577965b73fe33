//! Aggregation-free spatial-temporal community sensing.
//!
//! Participants hold partial, noisy readings of a sensor field over a window
//! of sensing cycles. Instead of shipping readings to an organizer, they pass
//! low-rank non-negative factors `(P, Q)` from peer to peer, each applying a
//! masked gradient step on local data. The organizer only ever receives the
//! finished factors, averages them and reconstructs the whole window.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`model`]: fields, hyperparameters, observations and factor pairs
//! - [`datagen`]: synthetic fields, coverage schedules and noisy observations
//! - [`factorization`]: masked loss, gradients, the truncated update and a
//!   centralized solver
//! - [`protocol`]: chains, message passing, recovery and the transcript audit
//! - [`baselines`]: truncated-SVD imputation and mean fill
//! - [`eval`]: error metrics, communication accounting and sweeps
//!
//! The `book/` directory next to this crate walks through each stage; its
//! code samples are compiled and run as doc-tests of this crate.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod model;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
pub use model::{build_window, FactorPair, Field, Hyperparams, LocalObservations};

// Each chapter of the guide becomes an empty module whose docs are the
// chapter, so `cargo test --doc` runs every sample in the book and README.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-model.md")]
    mod data_model {}
    #[doc = include_str!("../../../book/src/loss-and-gradients.md")]
    mod loss_and_gradients {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/recovery.md")]
    mod recovery {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
