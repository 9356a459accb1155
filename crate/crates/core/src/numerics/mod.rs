//! Dense `f64` tensors and the reverse-mode differentiation tape.
//!
//! The free functions here are value-level conveniences over the same
//! kernels the [`Tape`] records; use the tape when gradients are needed.

mod kernels;
mod mask;
mod params;
mod tape;
mod tensor;

pub use mask::Mask;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

use crate::error::Result;

fn unary(input: &Tensor, f: impl FnOnce(&mut Tape<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let k = tape.input(kernel.clone());
    let y = tape.conv2d(x, k, stride, padding)?;
    Ok(tape.value(y).clone())
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(tape::relu_scalar)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = parts.iter().map(|p| tape.input((*p).clone())).collect();
    let y = tape.concat_channels(&vars)?;
    Ok(tape.value(y).clone())
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    unary(input, |t, x| t.bilinear_resize(x, out_h, out_w))
}

pub fn channel_softmax(input: &Tensor) -> Result<Tensor> {
    unary(input, |t, x| t.channel_softmax(x))
}

/// Mean feature row over the foreground of `mask`; errors on an empty mask.
pub fn masked_mean(features: &Tensor, mask: &Mask) -> Result<Tensor> {
    unary(features, |t, x| t.masked_mean(x, mask))
}
