//! Ensemble graph p-Laplacian regularization for semi-supervised kernel
//! classifiers.
//!
//! The pipeline: build a kNN graph ([`graph`]), approximate one p-Laplacian
//! per candidate `p` ([`plap`]), fuse the candidates with learned simplex
//! weights ([`ensemble`]) and train kernel least-squares or hinge-loss
//! classifiers on the fused regularizer ([`learn`]). [`eval`] scores the
//! result and [`experiment`] drives whole protocols.

pub mod cache;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod kernel;
pub mod learn;
pub mod linalg;
pub mod plap;

pub use error::{Error, Result};
