//! Non-local attention blocks and their asymmetric pyramid-sampled variants,
//! built on a small dense `f64` tensor core, with analytic gradients, an
//! operation-count cost model and a phase-timing benchmark harness.

pub mod autograd;
pub mod bench;
pub mod blocks;
pub mod checks;
pub mod cost;
pub mod error;
mod par;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape3, Tensor};
