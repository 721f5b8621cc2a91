//! Dense `f64` tensors, a reverse-mode tape and the primitives the adapters
//! and the cue-enhancement module are built from.
//!
//! The free functions here are value-level conveniences: each one records the
//! corresponding tape primitive on a scratch tape, so there is a single
//! implementation of every forward rule.

mod gradcheck;
mod optim;
pub(crate) mod kernels;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error, GradCheck};
pub use optim::{Optimizer, OptimizerKind};
pub use rng::Rng;
#[cfg(test)]
pub(crate) use tape::Stencil;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

/// Softmax over the last axis.
pub fn softmax(a: &Tensor) -> Tensor {
    tape::softmax_last(a, None)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.value(out).clone())
}

/// Samples `map [H x W x C]` at `(row, col)` with clamped bilinear interpolation.
pub fn bilinear_sample(map: &Tensor, row: f64, col: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let p = tape.constant(Tensor::vector(vec![row, col]));
    let out = tape.bilinear_sample(m, p)?;
    Ok(tape.value(out).clone())
}
