//! Dense linear algebra, deterministic random numbers and the gradient tape.

mod matrix;
mod rng;
mod tape;

pub use matrix::{gemm, gemm_into, Matrix, JITTER_MAX, JITTER_START};
pub use rng::SeededRng;
pub(crate) use tape::se_kernel_value;
pub use tape::{Adjoints, Tape, Var};
