//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`]. Backward passes are themselves
//! recorded as tape operations, so a gradient can be differentiated again;
//! this is what makes meta-gradients through optimizer updates possible.
//!
//! ```
//! use datarater_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
//! let y = x.square().unwrap().mul(x).unwrap(); // x³
//! let dy = tape.gradients(y, &[x]).unwrap()[0]; // 3x²
//! let d2y = tape.gradient_values(dy, &[x]).unwrap(); // 6x
//! assert_eq!(d2y[0].item(), 12.0);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

mod check;
mod error;
mod ops;
mod tape;
mod tensor;

pub use check::{check_grad, relative_error, GradCheck};
pub use error::{AutodiffError, Result};
pub use tape::{clip_by_global_norm, GradRequest, NodeId, Order, Tape, Var};
pub use tensor::Tensor;
