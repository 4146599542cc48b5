pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod nhae;
pub mod nn;
pub mod pipeline;
pub mod ops;

pub use error::{Error, Result};
