//! Deterministic Vlasov-Poisson-Boltzmann simulation in bounded convex domains
//! with diffuse reflection at the wall.

pub mod boundary;
pub mod characteristics;
pub mod collision;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod geometry;
pub mod math;
pub mod solver;
pub mod spatial;
pub mod velocity;
pub mod verify;

pub use error::{Error, Result};
