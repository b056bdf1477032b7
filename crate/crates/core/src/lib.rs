//! Noisy mirror-inverting spin chains used as an entangling bus.
//!
//! The crate builds the engineered XX chain, integrates its Lindblad
//! master equation under local noise, extracts the resulting one- and
//! two-qubit channels as Choi states, and analyses them (fidelities,
//! entanglement breaking, model fits, graph-state generation).

pub mod analyze;
pub mod chain;
pub mod evolve;
pub mod graphgen;
pub mod noise;
pub mod numkit;
