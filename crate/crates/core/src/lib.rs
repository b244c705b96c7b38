pub mod error;
pub mod kernels;
pub mod model;
pub mod samplers;
pub mod synthetic;
pub mod evaluation;
pub mod cli;

pub use error::{Error, Result};
