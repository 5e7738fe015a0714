#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Barrier-switched command-filtered backstepping for strict-feedback plants
//! with input saturation.
//!
//! The crate is organised bottom-up: [`linalg`] and [`plant`] describe the
//! system, [`filters`] and [`perf`] the building blocks of the control laws,
//! [`controllers`] the laws themselves, [`invariant`] the certificates that
//! make the safety switch sound, and [`sim`] / [`scenario`] the closed loop.

pub mod controllers;
pub mod filters;
pub mod invariant;
pub mod linalg;
pub mod perf;
pub mod plant;
pub mod plots;
pub mod scenario;
pub mod sim;

pub use controllers::{ControllerKind, Region};
pub use invariant::{InvariantCertificate, LmiForm};
pub use linalg::SquareMatrix;
pub use perf::PerformanceSpec;
pub use plant::PlantModel;
pub use scenario::Scenario;
pub use sim::{SimConfig, Simulation, SimulationTrace};
