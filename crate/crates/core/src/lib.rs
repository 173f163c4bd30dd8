//! Finite abstractions of interconnected impulsive systems.
//!
//! The crate is organized along the pipeline it implements:
//!
//! - [`dsl`]: expression language for flow maps, jump maps and storage functions.
//! - [`model`]: subsystem and network descriptions, and the system definition file.
//! - [`grid`]: uniform quantization of boxes.
//! - [`flow`]: fixed-step integration and hybrid simulation.
//! - [`abstraction`]: sampled-data transition semantics and finite abstractions.
//! - [`certificate`]: storage-function checks, dwell-time condition and compositionality tests.
//! - [`compose`]: network composition of abstractions and simulation functions.
//! - [`verify`]: empirical relation checks, constant fitting and safety synthesis.

pub mod dsl;
pub mod grid;
pub mod model;
pub mod flow;
pub mod abstraction;
pub mod certificate;
pub mod compose;
pub mod verify;
