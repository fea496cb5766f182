//! Neuroevolution of augmenting topologies with selection and stopping rules
//! driven by matrix-based Rényi conditional mutual information, assembled
//! into a one-vs-all stacked classifier for profiled side-channel attacks.

pub mod cli;
pub mod config;
pub mod criteria;
pub mod data;
pub mod ensemble;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod evolution;
pub mod network;
pub mod rng;

pub use error::{Error, Result};
