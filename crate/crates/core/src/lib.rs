//! Referential-game agents, training, evaluation and protocol analysis.

pub mod agents;
pub mod analysis;
pub mod channel;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod game;
pub mod layers;
pub mod probe;
pub mod train;

pub use error::{Error, Result};

/// Floor applied to vector norms in cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;
