//! Small reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records operations on [`Var`] handles and replays them
//! backwards from a scalar loss. Trainable tensors live in a [`ParamSet`];
//! gradients come back as a [`Grads`] aligned with it. Only the primitives
//! the encoder, actors and critics need are provided, several of them fused
//! (layer normalization, masked multi-head attention) to keep the tape short.
//!
//! ```
//! use voltgrid::diffcore::{Graph, ParamSet, Tensor};
//!
//! let mut params = ParamSet::new();
//! let w = params.add("w", Tensor::scalar(3.0)).unwrap();
//! let mut g = Graph::new(&params);
//! let x = g.param(w);
//! let y = g.square(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data, vec![6.0]);
//! ```

mod adam;
mod attention;
mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use attention::AttentionSpec;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, gradcheck_where, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::{Grads, Linear, ParamId, ParamSet, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("attention window {0} has no valid rows")]
    AllMasked(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// Matrices are row-major; a transposed operand is read in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides can address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
