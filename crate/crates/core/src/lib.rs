//! Kibble-Zurek defect statistics in driven Rydberg chains.

pub mod analysis;
pub mod basis;
pub mod campaign;
pub mod error;
pub mod evolve;
pub mod geometry;
pub mod hamiltonian;
pub mod krylov;
pub mod mitigation;
pub mod observables;
pub mod protocol;

pub use error::{Error, Result};
