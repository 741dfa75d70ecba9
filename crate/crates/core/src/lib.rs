//! Invariant-trajectory knowledge editing on a toy multimodal model.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors on a recorded graph, reverse-mode gradients and
//!   a forward tangent channel for derivatives with respect to the
//!   environment scalar ω.
//! - [`model`]: a two-branch toy multimodal classifier with additive edit
//!   deltas on designated layers and an ω hook on the last hidden state.
//! - [`risks`]: reliability NLL, locality KL, multi-scale-kernel MMD
//!   generality risk and Monte-Carlo expectations over ω.
//! - [`irm_tv`]: the TV-ℓ1 penalty, the adaptive λ network, the Lagrangian
//!   and its primal-dual optimizer, plus the one-dimensional counterexample.
//! - [`envgen`]: a synthetic editing benchmark with semantic and factual
//!   shifts, serialised as JSONL.
//! - [`eval`]: editing metrics, one-step and sequential harnesses,
//!   ablations and the embedding-overlap statistic.
//! - [`config`], [`verify`]: run configuration and the self-check suite
//!   behind the command line tool.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod envgen;
pub mod error;
pub mod eval;
pub mod irm_tv;
pub mod model;
pub mod params;
pub mod risks;
pub mod tensor;
pub mod verify;

pub use error::{AutodiffError, Error, Result};
pub use tensor::Tensor;
