//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.
//!
//! The operator set is deliberately small: elementwise arithmetic, batched
//! matrix products, reshapes and index gathers, softmax, GELU, LayerNorm and
//! 3×3 same-padded convolution. Values are computed eagerly when an operation
//! is applied; [`Graph::backward`] replays the tape in reverse.
//!
//! ```
//! use transem_tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! g.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod nn;
mod ops;
mod tensor;

pub use error::TensorError;
pub use graph::{BackwardContext, Function, Graph, Var};
pub use nn::{gelu_scalar, normal_cdf};
pub use tensor::Tensor;
