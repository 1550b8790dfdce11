//! Density tracking for SDE transition densities on adaptive point clouds.

pub mod basis;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod io;
pub mod laplace;
pub mod mesh;
pub mod sde;
pub mod trapezoid;

pub use error::{DtqError, Result};

/// Largest supported state dimension.
pub const MAX_DIM: usize = 8;
