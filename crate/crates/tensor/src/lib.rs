//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every operation appends a node holding its
//! result and adjoint. [`Tape::backward`] replays the nodes in reverse.
//!
//! ```
//! use vidpred_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.var(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let x = tape.constant(Tensor::new([3], vec![4.0, 5.0, 6.0]).unwrap());
//! let p = tape.mul(w, x).unwrap();
//! let loss = tape.sum(p);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

mod check;
pub mod error;
mod ops;
mod real;
mod tape;
mod tensor;

pub use check::check_gradients;
pub use error::{Result, TensorError};
pub use ops::{softmax_tensor, BatchStats};
pub use real::{DType, Real};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{numel, strides, Tensor};

/// Numerically stable logistic function.
pub fn sigmoid<F: Real>(x: F) -> F {
    ops::sigmoid(x)
}
