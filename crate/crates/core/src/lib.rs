pub mod cli;
pub mod colormap;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{no_grad, Real, Tensor};
