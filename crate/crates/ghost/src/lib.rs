//! Numerical machinery for the slow, weakly curved Couette flow of a rarefied gas.
//!
//! The crate is organised bottom-up: a discrete velocity space, collision
//! operators on it, transport coefficients, the limiting fluid system, the
//! half-space boundary-layer solver, the asymptotic expansion that combines them,
//! and a direct kinetic solver used as a reference.

pub mod collision_ops;
pub mod error;
pub mod expansion;
pub mod hydro;
pub mod kinetic_ref;
pub mod linalg;
pub mod milne;
pub mod slab;
pub mod transport;
pub mod velocity_space;

pub use error::{GhostError, Result};
