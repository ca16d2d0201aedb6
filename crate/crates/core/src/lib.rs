//! Numerical engine for zero-sum mean-field-type differential games on the
//! flat torus.
//!
//! Particle ensembles stand for the distribution of agents. The crate
//! simulates their controlled flows, builds extremal-shift feedback
//! strategies from a stable value function, and computes lower and upper
//! value approximations by programmed iteration on a finite graph of
//! reachable measures.

pub mod control;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod measure;
pub mod ot;
pub mod pim;
pub mod scenario;
pub mod shift;
pub mod torus;

pub use error::{Error, Result};
