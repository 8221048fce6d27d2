//! Desk-scale laboratory for curriculum co-training of joint-embedding
//! predictive models on synthetic trajectory data.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`synthworld`] generates ICU-like synthetic stays, windows them, and
//!   splits them at the patient level;
//! - [`numerics`] is the differentiable-training substrate (tape autodiff,
//!   AdamW, schedules, checkpoints, gradient verification);
//! - [`encoder`] / [`predictor`] are the online/target record encoder pair
//!   and the block-causal latent trajectory predictor;
//! - [`curriculum`] implements the losses, the five-phase schedule, and the
//!   training paradigms;
//! - [`diagnostics`] measures rollout drift, collapse, and cohort geometry;
//! - [`probes`] runs the downstream probe harness (AUROC/AUPRC with
//!   clustered bootstrap CIs);
//! - [`harness`] ties everything into a cached, resumable pipeline behind
//!   the CLI.

pub mod curriculum;
pub mod diagnostics;
pub mod encoder;
pub mod harness;
pub mod numerics;
pub mod predictor;
pub mod probes;
pub mod synthworld;

mod error;

pub use error::{Error, Result};

/// Code version stamp embedded in artifacts and cache keys.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
