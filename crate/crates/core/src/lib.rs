//! Hierarchical circuit-graph classifier for resting-state BOLD cohorts.
//!
//! Pipeline: [`data`] turns BOLD series into node features and kNN graphs,
//! [`model`] maps them to five circuit embeddings and a class score,
//! [`train`] fits the composite objective, and [`eval`] runs the
//! cross-validation protocols.

pub mod atlas;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod interpret;
pub mod model;
pub mod run;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
