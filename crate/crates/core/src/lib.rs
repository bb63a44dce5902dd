//! Conditional flow-based full-body pose prior driven by head and hand observations.

pub mod error;
pub mod kinematics;

pub use error::{ErrorClass, FlagError, Result};
pub mod flow;
pub mod nn;
pub mod lra;
pub mod datagen;
pub mod training;
pub mod checkpoint;
pub mod refine;
pub mod eval;
