//! Viscoelastic finite-element ground truth.

pub mod constitutive;
pub mod material;
pub mod scenario;
pub mod solver;

pub use constitutive::{elastic_stress, qlv_update, strain_energy, Mat3, QlvCoefficients, QlvState};
pub use material::{derive_bulk_modulus, relaxation_modulus, Material, MaterialParams, PronyTerm, WATER_DENSITY};
pub use scenario::{
    generate_dataset, integration_step, sample_scenario, simulate, Contact, Frame, Scenario, ScenarioConfig,
    Sequence, SequenceDataset,
};
pub use solver::{explicit_step, stable_timestep, BodyState, ExplicitSolver, SolverConfig};
