pub mod attention;
pub mod block;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod runconfig;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use tensor::{Graph, Real, Tensor, Var};
