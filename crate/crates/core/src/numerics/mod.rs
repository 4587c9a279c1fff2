//! Small reverse-mode autodiff engine, SGD, and a finite-difference gradient oracle.

mod gradcheck;
pub mod kernels;
mod optim;
mod recurrent;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_difference_gradient, relative_error, REL_ERR_FLOOR};
pub use optim::{sgd_step, SgdState};
pub use recurrent::{recurrent_step, LstmWeights};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("gradient oracle error: {0}")]
    Oracle(String),
}

/// Softmax of `logits / temperature` for a plain vector.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, NumericsError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(NumericsError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out, temperature);
    Ok(out)
}
