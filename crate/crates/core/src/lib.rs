pub mod archive;
pub mod complexity;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
