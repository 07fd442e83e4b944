//! Simulator for over-the-air federated learning with sparsification,
//! linear compression and iterative hard thresholding reconstruction.

pub mod airchan;
pub mod error;
pub mod fedcore;
pub mod iht;
pub mod linmap;
pub mod numcore;
pub mod pipelines;
pub mod runner;
pub mod sparsify;

pub use error::{Error, Result};
