//! Macro-micro disentangled variational auto-encoder for implicit-feedback
//! collaborative filtering.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`] ingests rating logs, builds the binary user-item matrix and the
//!   fold-in split used for strong-generalisation evaluation.
//! * [`numerics`] holds a small dense tensor type, a reverse-mode tape and Adam.
//! * [`model`] is the disentangled VAE itself: prototype-based concept
//!   assignment, the per-concept encoder, the mixture decoder and the
//!   beta-weighted objective.
//! * [`trainer`] runs the training loop, early stopping, random search and
//!   adaptive shrinking of the number of concepts.
//! * [`metrics`] covers ranking metrics, the independence score and cluster
//!   agreement.
//! * [`control`] implements controllable recommendation along a single
//!   representation dimension.

pub mod control;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
