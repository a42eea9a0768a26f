//! Multi-objective deformable image registration by hypervolume maximization.
pub mod bundle;
pub mod cli;
pub mod error;
pub mod genmed;
pub mod hv;
pub mod metrics;
pub mod model;
pub mod pair;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
