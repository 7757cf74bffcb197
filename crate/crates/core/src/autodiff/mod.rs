//! Minimal dense reverse-mode automatic differentiation.
//!
//! The engine records one [`Tape`] per forward pass. There is no implicit
//! broadcasting apart from [`Tape::mul_scalar`]; every other shape alignment
//! is an explicit operator (`add_bias`, `node_mix`, `mean_nodes`, ...).

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{DType, Real, Tensor};

/// Row-wise softmax of a `[rows×cols]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&x| (x - max).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|p| *p = *p / z);
    }
    out
}
