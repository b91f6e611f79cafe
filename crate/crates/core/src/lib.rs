//! Context-conditioned collision risk quantification.
//!
//! The crate learns the conditional distribution of inter-vehicle spacing
//! from ordinary interactions and scores how extreme an observed spacing is
//! relative to its context. Supporting modules reconstruct trajectories,
//! compute baseline surrogate safety measures, attribute risk to context
//! factors and evaluate detection accuracy and timeliness.

pub mod attribution;
pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod ekf;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod lognormal;
pub mod model;
pub mod pipeline;
pub mod score;
pub mod synth;
pub mod train;

pub use error::{GssmError, Result};
pub use lognormal::LognormalParams;
