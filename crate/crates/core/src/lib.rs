//! Residual mixture-of-experts (RMoE) growth for small vision transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f32 tensors, a reverse-mode tape, AdamW and a
//!   finite-difference gradient checker.
//! - [`vit`]: a tiny pre-norm vision transformer with upstream
//!   (classification) and downstream (per-token) heads.
//! - [`moe`]: top-k softmax gating, expert combination, the load-balancing
//!   loss and the stop-gradient aligned combination.
//! - [`growth`]: expert banks inherited from dense MLPs, over-growing,
//!   gradient-based layer scores and grow plans.
//! - [`pipeline`]: synthetic tasks, FLOP accounting and the four training
//!   pipelines (dense, MoE from scratch, RMoE-I, RMoE-D).
//! - [`analysis`]: PCA trajectories, specialization matrices, routing maps
//!   and balance-loss curves.
//! - [`checkpoint`]: the `manifest.json` + `weights.bin` on-disk format.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod growth;
pub mod moe;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
