pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod flow;
pub mod model;
pub mod nif;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{NifError, Result};
