//! Numerical lab for random overlap structures: exact Gibbs measures of
//! mean-field spin glasses, atomic sampling measures on Hilbert space, the
//! cavity map acting on them, Ruelle cascades and the Parisi functional.

pub mod cascades;
pub mod cavity_map;
pub mod error;
pub mod gibbs_exact;
pub mod parisi;
pub mod rng;
pub mod rost_core;
pub mod spin_models;
pub mod stats;

pub use error::{Result, RostError};
