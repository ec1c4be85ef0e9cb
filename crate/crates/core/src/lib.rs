//! Few-qubit quantum energy teleportation: Hamiltonian construction, exact
//! density-matrix evaluation of the protocols, gate-level circuits with seeded
//! shot sampling, and readout-error mitigation.

pub mod error;
pub mod circuit;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod protocol;

pub use error::{Error, Result};
