//! Recorded computation graph.
//!
//! Every operation on [`Var`]s whose inputs require gradients allocates a
//! node holding its forward value and its parents. Backward rules are
//! themselves written with `Var` operations, so a gradient computed with
//! `create_graph = true` is again part of a graph and can be differentiated.

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::{self, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let previous = RECORDING.with(|r| r.replace(false));
        Self { previous }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        RECORDING.with(|r| r.set(self.previous));
    }
}

/// Runs `f` with recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

pub fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
    Sum(Var),
    Expand(Var),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    LogSoftmax(Var),
    Gather(Var, Rc<[u32]>),
    ScatterAdd(Var, Rc<[u32]>),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | AddRow(a, b) => {
                vec![a, b]
            }
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | Sum(a)
            | Expand(a)
            | Reshape(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Relu(a)
            | Exp(a)
            | Sqrt(a)
            | LogSoftmax(a)
            | Gather(a, _)
            | ScatterAdd(a, _) => vec![a],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            AddRow(..) => "add_row",
            SumRows(..) => "sum_rows",
            BroadcastRows(..) => "broadcast_rows",
            SumCols(..) => "sum_cols",
            BroadcastCols(..) => "broadcast_cols",
            Sum(..) => "sum",
            Expand(..) => "expand",
            Reshape(..) => "reshape",
            Tanh(..) => "tanh",
            Sigmoid(..) => "sigmoid",
            Softplus(..) => "softplus",
            Relu(..) => "relu",
            Exp(..) => "exp",
            Sqrt(..) => "sqrt",
            LogSoftmax(..) => "log_softmax",
            Gather(..) => "gather",
            ScatterAdd(..) => "scatter_add",
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: usize,
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A tensor value together with its place in the recorded graph.
#[derive(Clone)]
pub struct Var(pub(crate) Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op.name())
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn make(value: Tensor, op: Op, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op,
            requires_grad,
        }))
    }

    /// A differentiable input.
    pub fn leaf(value: Tensor) -> Var {
        Self::make(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Self::make(value, Op::Leaf, false)
    }

    pub fn scalar(value: f64) -> Var {
        Self::constant(Tensor::scalar(value))
    }

    fn from_op(value: Tensor, op: Op) -> Result<Var> {
        let value = value.ensure_finite(op.name())?;
        let track = is_recording() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Ok(Self::make(value, op, true))
        } else {
            Ok(Self::make(value, Op::Leaf, false))
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> Result<f64> {
        self.0.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Self::constant(self.0.value.clone())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), "add", |a, b| a + b)?;
        Self::from_op(v, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), "sub", |a, b| a - b)?;
        Self::from_op(v, Op::Sub(self.clone(), other.clone()))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), "mul", |a, b| a * b)?;
        Self::from_op(v, Op::Mul(self.clone(), other.clone()))
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Var) -> Result<Var> {
        let v = self.value().zip_map(other.value(), "div", |a, b| a / b)?;
        Self::from_op(v, Op::Div(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        Self::from_op(self.value().map(|a| a * c), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        Self::from_op(self.value().map(|a| a + c), Op::AddScalar(self.clone()))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = self.value().matmul(other.value())?;
        Self::from_op(v, Op::MatMul(self.clone(), other.clone()))
    }

    pub fn t(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Self::from_op(v, Op::Transpose(self.clone()))
    }

    /// `[n, m] + [m]`, the bias add. The only broadcasting primitive.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let (n, m) = self.value().dims2()?;
        if row.shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let b = row.value().data();
        let mut data = self.value().data().to_vec();
        for i in 0..n {
            for (x, bv) in data[i * m..(i + 1) * m].iter_mut().zip(b) {
                *x += bv;
            }
        }
        Self::from_op(Tensor::new(vec![n, m], data)?, Op::AddRow(self.clone(), row.clone()))
    }

    /// `[n, m] -> [m]`, summing over rows.
    pub fn sum_rows(&self) -> Result<Var> {
        let (n, m) = self.value().dims2()?;
        let src = self.value().data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(&src[i * m..(i + 1) * m]) {
                *o += x;
            }
        }
        Self::from_op(Tensor::new(vec![m], out)?, Op::SumRows(self.clone()))
    }

    /// `[m] -> [n, m]`, repeating the vector as every row.
    pub fn broadcast_rows(&self, n: usize) -> Result<Var> {
        let m = self.vector_len("broadcast_rows")?;
        let src = self.value().data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        Self::from_op(Tensor::new(vec![n, m], out)?, Op::BroadcastRows(self.clone()))
    }

    /// `[n, m] -> [n]`, summing within each row.
    pub fn sum_cols(&self) -> Result<Var> {
        let (n, m) = self.value().dims2()?;
        let src = self.value().data();
        let out = (0..n).map(|i| src[i * m..(i + 1) * m].iter().sum()).collect();
        Self::from_op(Tensor::new(vec![n], out)?, Op::SumCols(self.clone()))
    }

    /// `[n] -> [n, m]`, repeating each entry along its row.
    pub fn broadcast_cols(&self, m: usize) -> Result<Var> {
        let n = self.vector_len("broadcast_cols")?;
        let src = self.value().data();
        let mut out = Vec::with_capacity(n * m);
        for &x in src {
            out.extend(std::iter::repeat_n(x, m));
        }
        Self::from_op(Tensor::new(vec![n, m], out)?, Op::BroadcastCols(self.clone()))
    }

    /// Sum of all elements, as a zero-dimensional tensor.
    pub fn sum(&self) -> Result<Var> {
        Self::from_op(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var> {
        let x = self.item()?;
        Self::from_op(Tensor::full(shape, x)?, Op::Expand(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        Self::from_op(self.value().reshape(shape)?, Op::Reshape(self.clone()))
    }

    pub fn dot(&self, other: &Var) -> Result<Var> {
        self.mul(other)?.sum()
    }

    pub fn tanh(&self) -> Result<Var> {
        Self::from_op(self.value().map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        Self::from_op(self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Result<Var> {
        let v = self
            .value()
            .map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        Self::from_op(v, Op::Softplus(self.clone()))
    }

    /// Rectifier. Its second derivative is zero almost everywhere and
    /// undefined at the kink, so smooth activations should be preferred when
    /// gradients of gradients are taken.
    pub fn relu(&self) -> Result<Var> {
        Self::from_op(self.value().map(|x| x.max(0.0)), Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Result<Var> {
        Self::from_op(self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn sqrt(&self) -> Result<Var> {
        Self::from_op(self.value().map(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    /// Row-wise log-softmax of a `[n, c]` matrix.
    pub fn log_softmax(&self) -> Result<Var> {
        let v = self.value().log_softmax_rows()?;
        Self::from_op(v, Op::LogSoftmax(self.clone()))
    }

    /// `out[j] = self[index[j]]` over the flattened input, `0` where
    /// `index[j] == PAD`.
    pub fn gather(&self, index: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        self.check_index(&index, self.value().numel(), "gather")?;
        if index.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Invalid(format!(
                "gather index length {} does not match output shape {shape:?}",
                index.len()
            )));
        }
        let v = tensor::gather(self.value(), &index, shape)?;
        Self::from_op(v, Op::Gather(self.clone(), index))
    }

    /// `out[index[j]] += self[j]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, index: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        self.check_index(&index, shape.iter().product(), "scatter_add")?;
        if index.len() != self.value().numel() {
            return Err(TensorError::Invalid(format!(
                "scatter_add index length {} does not match input size {}",
                index.len(),
                self.value().numel()
            )));
        }
        let v = tensor::scatter_add(self.value(), &index, shape)?;
        Self::from_op(v, Op::ScatterAdd(self.clone(), index))
    }

    /// Mean (`reduce_mean = true`) or summed softmax cross-entropy of
    /// `[n, c]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize], reduce_mean: bool) -> Result<Var> {
        let n = labels.len() as f64;
        let picked = self.log_probs_of(labels)?.sum()?;
        picked.scale(if reduce_mean { -1.0 / n } else { -1.0 })
    }

    /// Per-row cross-entropy, shape `[n]`.
    pub fn cross_entropy_per_row(&self, labels: &[usize]) -> Result<Var> {
        self.log_probs_of(labels)?.neg()
    }

    fn log_probs_of(&self, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value().dims2()?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let index: Rc<[u32]> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (i * c + y) as u32)
            .collect();
        self.log_softmax()?.gather(index, &[n])
    }

    fn vector_len(&self, op: &'static str) -> Result<usize> {
        match self.shape() {
            &[m] => Ok(m),
            other => Err(TensorError::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn check_index(&self, index: &[u32], bound: usize, op: &'static str) -> Result<()> {
        if let Some(&bad) = index.iter().find(|&&i| i != tensor::PAD && i as usize >= bound) {
            return Err(TensorError::Invalid(format!(
                "{op} index {bad} out of range {bound}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
