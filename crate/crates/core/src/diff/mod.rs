//! Minimal reverse-mode differentiation over dense `f64` tensors, plus a
//! central-difference gradient checker.
//!
//! ```
//! use consistent_attention::diff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let y = g.relu(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[1.0, 0.0, 1.0]);
//! ```

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var, KL_FLOOR};
pub use tensor::Tensor;
