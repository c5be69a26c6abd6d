pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod image;
pub mod metrics;
mod kernels;
pub mod nn;
pub mod operators;
pub mod oracle;
pub mod pamri;
pub mod phantoms;
pub mod sampler;
pub mod tensor;

pub use autodiff::{LinearMap, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
