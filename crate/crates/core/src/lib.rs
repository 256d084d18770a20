pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod narx;
pub mod recognition;
pub mod sparse_gp;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
