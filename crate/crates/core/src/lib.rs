//! Sampling-based GCN training with historical-state variance reduction.
//!
//! The crate is organised bottom-up:
//!
//! - [`matrix`]: dense and CSR matrices
//! - [`graph`]: datasets, Laplacian normalization, synthetic SBM graphs
//! - [`sampler`]: per-layer sampled Laplacians and an exhaustive enumerator
//! - [`model`]: GCN forward and backward recursions, losses
//! - [`vr`]: historical stores, snapshots and the control-variate recursions
//! - [`optim`] and [`train`]: optimizers and the SGCN, SGCN+ and SGCN++ loops
//! - [`analysis`]: gradient error, bias/variance decomposition, finite differences

pub mod analysis;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod train;
pub mod vr;

pub use error::{Error, Result};
