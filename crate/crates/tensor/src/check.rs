//! Central finite-difference validation of tape gradients.

use crate::backward::grad;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-entry `|tape - fd| / max(|tape|, |fd|, 1e-8)`.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub tape: Tensor,
    pub finite_diff: Tensor,
}

/// Per-entry relative error with a small absolute floor so that entries that
/// are both (numerically) zero compare equal.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "max_rel_err",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let diff = (x - y).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / x.abs().max(y.abs()).max(1e-8)
            }
        })
        .fold(0.0, f64::max))
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// coordinate of `point`.
pub fn finite_difference(
    f: &dyn Fn(&Var) -> Result<Var>,
    point: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    // evaluated with the tape on: f may differentiate internally
    let mut out = Vec::with_capacity(point.numel());
    let mut x = point.clone();
    for i in 0..point.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let hi = f(&Var::constant(x.clone()))?.item()?;
        x.data_mut()[i] = orig - eps;
        let lo = f(&Var::constant(x.clone()))?.item()?;
        x.data_mut()[i] = orig;
        let d = (hi - lo) / (2.0 * eps);
        if !d.is_finite() {
            return Err(TensorError::NonFinite("finite_difference"));
        }
        out.push(d);
    }
    Tensor::new(point.shape().to_vec(), out)
}

/// Compares the tape gradient of scalar `f` at `point` with central finite
/// differences.
pub fn grad_check(
    f: &dyn Fn(&Var) -> Result<Var>,
    point: &Tensor,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let x = Var::leaf(point.clone());
    let y = f(&x)?;
    let tape = match grad(&y, &[x], false) {
        Ok(mut g) => g.remove(0).value().clone(),
        // f does not depend on its input at all
        Err(TensorError::NotOnTape(_)) => Tensor::zeros_like(point),
        Err(e) => return Err(e),
    };
    let finite_diff = finite_difference(f, point, eps)?;
    let max_rel_err = max_rel_err(&tape, &finite_diff)?;
    Ok(GradCheckReport {
        max_rel_err,
        tolerance: tol,
        passed: max_rel_err <= tol,
        tape,
        finite_diff,
    })
}

/// Hessian-vector product `H v` of scalar `f` at `point`, by differentiating
/// `grad f · v` once more.
pub fn hessian_vector_product(
    f: &dyn Fn(&Var) -> Result<Var>,
    point: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let x = Var::leaf(point.clone());
    let y = f(&x)?;
    let g = grad(&y, std::slice::from_ref(&x), true)?.remove(0);
    let gv = g.dot(&Var::constant(v.clone()))?;
    Ok(grad(&gv, &[x], false)?.remove(0).value().clone())
}
