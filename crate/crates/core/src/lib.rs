//! Simplified-Newton reconstruction for multispectral CT with geometrically
//! inconsistent per-spectrum scans, plus the forward model, projector, FBP,
//! baseline solvers and convergence diagnostics it is evaluated against.

pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod phantoms;
pub mod projector;
pub mod runner;
pub mod solvers;
pub mod spectral;

pub use error::{Error, Result};
