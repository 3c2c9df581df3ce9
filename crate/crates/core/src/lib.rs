pub mod autodiff;
pub mod blocks;
pub mod checks;
pub mod data;
pub mod decoder;
pub mod error;
pub mod layers;
pub mod masl;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use autodiff::{grad_check, grad_check_with, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{ComplexTensor, DType, Tensor};
