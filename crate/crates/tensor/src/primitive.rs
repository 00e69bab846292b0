//! Name-based dispatch over the recordable primitives.

use crate::error::{Result, TensorError};
use crate::var::Var;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    /// Bias add, `[n, m] + [m]`.
    AddRow,
    Mul,
    Div,
    Scale(f64),
    Tanh,
    Softplus,
    Relu,
    Sqrt,
    Sum,
    Dot,
    /// Mean softmax cross-entropy of logits against the given labels.
    SoftmaxCrossEntropy(Vec<usize>),
}

impl Primitive {
    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::AddRow
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Dot => 2,
            _ => 1,
        }
    }
}

/// Applies `op` to `inputs`, recording a node when any input requires
/// gradients and recording is enabled.
pub fn forward_primitive(op: &Primitive, inputs: &[Var]) -> Result<Var> {
    if inputs.len() != op.arity() {
        return Err(TensorError::Invalid(format!(
            "{op:?} takes {} inputs, got {}",
            op.arity(),
            inputs.len()
        )));
    }
    let a = &inputs[0];
    match op {
        Primitive::MatMul => a.matmul(&inputs[1]),
        Primitive::Add => a.add(&inputs[1]),
        Primitive::Sub => a.sub(&inputs[1]),
        Primitive::AddRow => a.add_row(&inputs[1]),
        Primitive::Mul => a.mul(&inputs[1]),
        Primitive::Div => a.div(&inputs[1]),
        Primitive::Dot => a.dot(&inputs[1]),
        Primitive::Scale(c) => a.scale(*c),
        Primitive::Tanh => a.tanh(),
        Primitive::Softplus => a.softplus(),
        Primitive::Relu => a.relu(),
        Primitive::Sqrt => a.sqrt(),
        Primitive::Sum => a.sum(),
        Primitive::SoftmaxCrossEntropy(labels) => a.cross_entropy(labels, true),
    }
}
