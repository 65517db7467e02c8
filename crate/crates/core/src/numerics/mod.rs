//! Dense tensors, a reverse-mode tape over whole-tensor primitives, and a
//! central-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Cosine similarity between `u` and every row of `rows` (`[c, d]`).
pub fn cosine_sim<S: Scalar>(u: &[S], rows: &Tensor<S>) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new([1, u.len()], u.to_vec())?);
    let e = tape.constant(rows.clone());
    let s = tape.cosine_rows(p, e)?;
    Ok(tape.value(s).data().to_vec())
}

#[cfg(test)]
mod tests;
