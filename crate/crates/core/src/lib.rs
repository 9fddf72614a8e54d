//! Soft-tissue deformation surrogates: viscoelastic FEM ground truth,
//! physics-guided neural surrogates, training, evaluation and storage.

pub mod error;
pub mod evalkit;
pub mod femsim;
pub mod meshkit;
pub mod store;
pub mod surrogate;
pub mod trainer;

pub use error::{CoreError, Result};
