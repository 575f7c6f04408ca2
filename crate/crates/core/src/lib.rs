//! Desk-scale training laboratory for muP-parameterized tiny decoder-only
//! transformers with a warmstarting operator (shrink + zero-pad + muP
//! perturbation).
//!
//! The crate is organized along the pipeline:
//! [`graph`] (tensor engine) -> [`param`] (abc-parameterization rules) ->
//! [`model`] (GPT) -> [`warmstart`] (growth operator) -> [`train`]
//! (protocol) -> [`metrics`] (coordinate checks and smoothing).

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod train;
pub mod warmstart;

pub use error::{Error, Result};
