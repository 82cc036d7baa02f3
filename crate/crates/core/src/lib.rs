//! Graph-based discrete denoising diffusion for MIMO detection, with
//! classical lattice baselines and a seeded SER benchmark harness.

pub mod bench;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod instance;
pub mod lattice;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
