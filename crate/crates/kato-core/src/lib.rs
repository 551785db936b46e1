//! Numerical laboratory for boundary-value Schrodinger smoothing.
//!
//! The crate splits into a phase-space side (coefficient symbols, the
//! Hamiltonian and generalized bicharacteristic flows, escape functions)
//! and a quantum side (discrete Dirichlet operators, functional calculus,
//! propagation, and semiclassical measurements). The two meet in the
//! acceptance suite, where flow-level predictions are tested against the
//! discrete evolution.

pub mod boundary;
pub mod cutoffs;
pub mod discrete;
pub mod escape;
pub mod evolve;
pub mod genflow;
pub mod hamflow;
pub mod phasespace;
pub mod sparse;
pub mod symbols;
pub mod util;
