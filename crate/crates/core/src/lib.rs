//! Unsupervised discovery of editing directions in the conditioning space of
//! a diffusion denoiser, plus the tooling to apply, compose and evaluate them.
//!
//! The pieces, bottom-up:
//!
//! - [`schedule`]: noise schedules, forward noising, DDIM sampling and inversion.
//! - [`denoiser`]: the noise-prediction network, guidance, training, persistence.
//! - [`bank`]: the learnable direction embeddings.
//! - [`data`]: synthetic factor datasets and image-folder ingestion.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bank;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod denoiser;
pub mod edit;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod nn;
pub mod schedule;
pub mod seed;

pub use error::{Error, Result};
