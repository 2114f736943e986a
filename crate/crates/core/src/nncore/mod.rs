//! Dense tensors, reverse-mode differentiation and parameter storage.

mod checkpoint;
mod gradcheck;
mod init;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_params, write_params, CheckpointHeader};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use init::{Initializer, INIT_STD};
pub use params::{Gradients, Param, ParamId, ParamRegistry};
pub use tape::{bce_with_logit, sigmoid, Pooling, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Matrix product of two tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let reg = ParamRegistry::new();
    let mut tape = Tape::new(&reg);
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut data = x.data().to_vec();
    tape::softmax_in_place(&mut data, x.cols());
    Tensor::new(x.shape().to_vec(), data).expect("same shape as input")
}

/// Per-row normalisation to zero mean and unit variance, then `gain ⊙ x + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let reg = ParamRegistry::new();
    let mut tape = Tape::new(&reg);
    let vx = tape.constant(x.clone());
    let vg = tape.constant(gain.clone());
    let vb = tape.constant(bias.clone());
    let out = tape.layer_norm(vx, vg, vb, eps)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
