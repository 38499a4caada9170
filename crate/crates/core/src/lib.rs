//! Hexagonal mobility flows and trajectory-user linking.
//!
//! The crate turns raw check-in / GPS trajectories into sequences of
//! hexagonal grid cells, builds the trajectory-induced spatial graph, and
//! trains a small from-scratch encoder model (graph-convolutional spatial
//! embeddings, non-invasive self-attention, masked-token pretraining,
//! class-balanced fine-tuning) that links anonymous trajectories back to
//! the users who generated them.

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod graph;
pub mod hexgrid;
pub mod sparse;

pub use error::{Error, Result};
