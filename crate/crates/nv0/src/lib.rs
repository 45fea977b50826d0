//! Simulation and parameter-estimation toolkit for the orbital degree of
//! freedom of the neutral nitrogen-vacancy center (NV0).
//!
//! The ground-state orbital doublet of NV0 splits under spin-orbit coupling
//! and transverse strain, and couples linearly to electric fields. This crate
//! builds the relevant Hamiltonians, evolves the open three-level system
//! (two ground orbital branches plus one optically excited level) through
//! pulse sequences, reproduces the standard measurement protocols (dc Stark
//! shift of the optical line, orbital T1, optically detected electrical
//! resonance, Autler-Townes splitting, Rabi and Ramsey scans), and recovers
//! the physical parameters from the synthetic data by nonlinear least
//! squares.

pub mod config;
pub mod dynamics;
pub mod estimation;
pub mod experiments;
pub mod fields;
pub mod hamiltonian;
pub mod linalg;

pub use dynamics::{DensityState, PlTrace, PulseSequence, Segment};
pub use estimation::{FitModel, FitResult};
pub use experiments::Dataset;
pub use fields::{ElectrodeGeometry, FieldVectorLab, FieldVectorNv};
pub use hamiltonian::{MixingCoefficients, NvParams};
pub use linalg::{BasisTag, OperatorMatrix};
