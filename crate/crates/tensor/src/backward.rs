use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::var::{NoGradGuard, Op, Var};

/// Gradients of a zero-dimensional `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are recorded and may be
/// differentiated again; otherwise they are constants and the backward pass
/// records nothing.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    if !output.shape().is_empty() {
        return Err(TensorError::NotScalar(output.shape().to_vec()));
    }
    let _guard = (!create_graph).then(NoGradGuard::new);

    let order = topo_order(output);
    let reachable: HashSet<usize> = order.iter().map(|v| v.id()).collect();
    for w in wrt {
        if !reachable.contains(&w.id()) {
            return Err(TensorError::NotOnTape(w.id()));
        }
    }

    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::scalar(1.0)));
    for node in &order {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        for (parent, pg) in backward_rule(node, &g)? {
            if !parent.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }

    wrt.iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .ok_or(TensorError::NotOnTape(w.id()))
        })
        .collect()
}

/// Nodes reachable from `output` through gradient-requiring edges, output
/// first. Node ids grow with creation time, so descending id order is a
/// valid reverse topological order.
fn topo_order(output: &Var) -> Vec<Var> {
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    let mut nodes = Vec::new();
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for p in v.0.op.parents() {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));
    nodes
}

fn backward_rule(node: &Var, g: &Var) -> Result<Vec<(Var, Var)>> {
    use Op::*;
    let out = node;
    Ok(match &node.0.op {
        Leaf => vec![],
        Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg()?)],
        Mul(a, b) => vec![(a.clone(), g.mul(b)?), (b.clone(), g.mul(a)?)],
        Div(a, b) => vec![
            (a.clone(), g.div(b)?),
            (b.clone(), g.mul(out)?.div(b)?.neg()?),
        ],
        Scale(a, c) => vec![(a.clone(), g.scale(*c)?)],
        AddScalar(a) => vec![(a.clone(), g.clone())],
        MatMul(a, b) => vec![
            (a.clone(), g.matmul(&b.t()?)?),
            (b.clone(), a.t()?.matmul(g)?),
        ],
        Transpose(a) => vec![(a.clone(), g.t()?)],
        AddRow(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.sum_rows()?)],
        SumRows(a) => vec![(a.clone(), g.broadcast_rows(a.shape()[0])?)],
        BroadcastRows(a) => vec![(a.clone(), g.sum_rows()?)],
        SumCols(a) => vec![(a.clone(), g.broadcast_cols(a.shape()[1])?)],
        BroadcastCols(a) => vec![(a.clone(), g.sum_cols()?)],
        Sum(a) => vec![(a.clone(), g.expand(a.shape())?)],
        Expand(a) => vec![(a.clone(), g.sum()?.reshape(a.shape())?)],
        Reshape(a) => vec![(a.clone(), g.reshape(a.shape())?)],
        Tanh(a) => {
            let slope = out.square()?.neg()?.add_scalar(1.0)?;
            vec![(a.clone(), g.mul(&slope)?)]
        }
        Sigmoid(a) => {
            let slope = out.mul(&out.neg()?.add_scalar(1.0)?)?;
            vec![(a.clone(), g.mul(&slope)?)]
        }
        Softplus(a) => vec![(a.clone(), g.mul(&a.sigmoid()?)?)],
        Relu(a) => {
            let mask = Var::constant(a.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            vec![(a.clone(), g.mul(&mask)?)]
        }
        Exp(a) => vec![(a.clone(), g.mul(out)?)],
        Sqrt(a) => vec![(a.clone(), g.scale(0.5)?.div(out)?)],
        LogSoftmax(a) => {
            // g - softmax * rowsum(g)
            let cols = a.shape()[1];
            let softmax = out.exp()?;
            let row_sums = g.sum_cols()?.broadcast_cols(cols)?;
            vec![(a.clone(), g.sub(&softmax.mul(&row_sums)?)?)]
        }
        Gather(a, index) => vec![(a.clone(), g.scatter_add(index.clone(), a.shape())?)],
        ScatterAdd(a, index) => vec![(a.clone(), g.gather(index.clone(), a.shape())?)],
    })
}
