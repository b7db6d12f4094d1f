//! Irreversible port-Hamiltonian systems: modeling, simulation with balance
//! checks, minimal energy/entropy/exergy state transitions by direct
//! transcription, and numerical turnpike diagnostics toward the set of
//! thermodynamic equilibria.
//!
//! The shipped example is a two-compartment heat exchanger in entropy
//! coordinates; see [`models`].

pub mod cli;
pub mod config;
pub mod model;
pub mod models;
pub mod ocp;
pub mod plot;
pub mod sim;
pub mod solver;
pub mod turnpike;
