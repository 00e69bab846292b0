//! Dense `f64` tensors and a reverse-mode autodiff graph whose backward pass
//! is itself recorded, so gradients can be differentiated again.
//!
//! ```
//! use seqmatch_tensor::{grad, Tensor, Var};
//!
//! let x = Var::leaf(Tensor::vector(vec![2.0]).unwrap());
//! let y = x.square().unwrap().square().unwrap().sum().unwrap(); // x^4
//! let dy = grad(&y, &[x.clone()], true).unwrap().remove(0); // 4x^3
//! let d2y = grad(&dy.sum().unwrap(), &[x], false).unwrap().remove(0); // 12x^2
//! assert_eq!(d2y.value().data(), &[48.0]);
//! ```

mod backward;
mod check;
mod error;
mod params;
mod primitive;
mod tensor;
mod var;

pub use backward::grad;
pub use check::{finite_difference, grad_check, hessian_vector_product, max_rel_err, GradCheckReport};
pub use error::{Result, TensorError};
pub use params::ParamSet;
pub use primitive::{forward_primitive, Primitive};
pub use tensor::{Tensor, PAD};
pub use var::{is_recording, no_grad, NoGradGuard, Var};
