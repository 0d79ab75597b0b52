pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
