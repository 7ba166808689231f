pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod hwmodel;
pub mod mapping;
pub mod netspec;
pub mod quant;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
