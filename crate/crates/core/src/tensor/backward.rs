//! Reverse-mode accumulation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use super::tape::{Node, Op, Tape};
use super::Tensor;
use crate::error::{Error, Result};

/// Gradient of a single-element `output` with respect to each of `inputs`.
///
/// With `create_graph` the backward pass is itself recorded, so the returned
/// gradients can be differentiated again. Inputs that `output` does not
/// depend on receive a zero tensor of their own shape, as does every input
/// when `output` is not recorded at all.
pub fn grad(output: &Tensor, inputs: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient of non-scalar output with shape {:?}",
            output.shape()
        )));
    }
    vjp(
        std::slice::from_ref(output),
        &[output.ones_like()],
        inputs,
        create_graph,
    )
}

/// Vector-Jacobian product: `sum_i cotangents[i]^T d outputs[i] / d inputs`.
pub fn vjp(
    outputs: &[Tensor],
    cotangents: &[Tensor],
    inputs: &[Tensor],
    create_graph: bool,
) -> Result<Vec<Tensor>> {
    if outputs.len() != cotangents.len() {
        return Err(Error::invalid("one cotangent per output required"));
    }
    for (o, c) in outputs.iter().zip(cotangents) {
        if o.shape() != c.shape() {
            return Err(Error::invalid(format!(
                "cotangent shape {:?} does not match output {:?}",
                c.shape(),
                o.shape()
            )));
        }
    }
    let mut input_ids = HashSet::new();
    for t in inputs {
        match &t.node {
            Some(n) => {
                input_ids.insert(n.id);
            }
            None => {
                return Err(Error::invalid(
                    "gradient requested for an unrecorded tensor",
                ))
            }
        }
    }

    Tape::with_recording(create_graph, || {
        let nodes = collect(outputs);

        // A node is relevant when some requested input is among its ancestors (or itself).
        let mut relevant: HashSet<_> = HashSet::new();
        for (id, node) in &nodes {
            if input_ids.contains(id)
                || node
                    .inputs
                    .iter()
                    .any(|t| t.node.as_ref().is_some_and(|n| relevant.contains(&n.id)))
            {
                relevant.insert(*id);
            }
        }

        let mut grads: HashMap<_, Tensor> = HashMap::new();
        for (o, c) in outputs.iter().zip(cotangents) {
            if let Some(n) = &o.node {
                if relevant.contains(&n.id) {
                    let c = c.detach();
                    accumulate(&mut grads, n.id, c)?;
                }
            }
        }

        for (id, node) in nodes.iter().rev() {
            if !relevant.contains(id) {
                continue;
            }
            let g = if input_ids.contains(id) {
                grads.get(id).cloned()
            } else {
                grads.remove(id)
            };
            let Some(g) = g else { continue };
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|t| t.node.as_ref().is_some_and(|n| relevant.contains(&n.id)))
                .collect();
            let input_grads = backward_rule(node, &g, &needs)?;
            for ((inp, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                if let (true, Some(gi), Some(n)) = (need, gi, &inp.node) {
                    accumulate(&mut grads, n.id, gi)?;
                }
            }
        }

        Ok(inputs
            .iter()
            .map(|t| {
                let id = t.node.as_ref().expect("checked above").id;
                grads.get(&id).cloned().unwrap_or_else(|| t.zeros_like())
            })
            .collect())
    })
}

fn collect(outputs: &[Tensor]) -> BTreeMap<super::NodeId, Arc<Node>> {
    let mut nodes = BTreeMap::new();
    let mut stack: Vec<Arc<Node>> = outputs.iter().filter_map(|t| t.node.clone()).collect();
    while let Some(node) = stack.pop() {
        if nodes.contains_key(&node.id) {
            continue;
        }
        for t in &node.inputs {
            if let Some(n) = &t.node {
                if !nodes.contains_key(&n.id) {
                    stack.push(Arc::clone(n));
                }
            }
        }
        nodes.insert(node.id, node);
    }
    nodes
}

fn accumulate(
    grads: &mut HashMap<super::NodeId, Tensor>,
    id: super::NodeId,
    g: Tensor,
) -> Result<()> {
    let next = match grads.remove(&id) {
        Some(prev) => prev.add(&g)?,
        None => g,
    };
    grads.insert(id, next);
    Ok(())
}

/// Reduce a broadcast gradient back to the operand's shape.
fn unbroadcast(g: Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g)
    } else if shape.is_empty() {
        Ok(g.sum())
    } else {
        Err(Error::InternalConsistency(format!(
            "cannot reduce gradient {:?} to {shape:?}",
            g.shape()
        )))
    }
}

fn backward_rule(node: &Node, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let x = &node.inputs;
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            need(0)
                .then(|| unbroadcast(g.clone(), x[0].shape()))
                .transpose()?,
            need(1)
                .then(|| unbroadcast(g.clone(), x[1].shape()))
                .transpose()?,
        ],
        Op::Sub => vec![
            need(0)
                .then(|| unbroadcast(g.clone(), x[0].shape()))
                .transpose()?,
            need(1)
                .then(|| unbroadcast(g.neg(), x[1].shape()))
                .transpose()?,
        ],
        Op::Mul => vec![
            need(0)
                .then(|| unbroadcast(g.mul(&x[1])?, x[0].shape()))
                .transpose()?,
            need(1)
                .then(|| unbroadcast(g.mul(&x[0])?, x[1].shape()))
                .transpose()?,
        ],
        Op::Div => vec![
            need(0)
                .then(|| unbroadcast(g.div(&x[1])?, x[0].shape()))
                .transpose()?,
            need(1)
                .then(|| {
                    let num = g.mul(&x[0])?;
                    unbroadcast(num.div(&x[1].square())?.neg(), x[1].shape())
                })
                .transpose()?,
        ],
        Op::Neg => vec![Some(g.neg())],
        Op::Relu => {
            let mask: Vec<f64> = x[0]
                .data()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            vec![Some(g.mul(&x[0].with_data(mask)?)?)]
        }
        Op::Tanh => {
            let y = x[0].tanh();
            vec![Some(g.mul(&y.square().rsub_scalar(1.0))?)]
        }
        Op::Sigmoid => {
            let s = x[0].sigmoid();
            vec![Some(g.mul(&s.mul(&s.rsub_scalar(1.0))?)?)]
        }
        Op::Exp => vec![Some(g.mul(&x[0].exp())?)],
        Op::Log => vec![Some(g.div(&x[0])?)],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::MatMul => vec![
            need(0).then(|| g.matmul(&x[1].transpose()?)).transpose()?,
            need(1).then(|| x[0].transpose()?.matmul(g)).transpose()?,
        ],
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Reshape => vec![Some(g.reshape(x[0].shape())?)],
        Op::Sum => vec![Some(g.expand(x[0].shape())?)],
        Op::Expand => vec![Some(g.sum().reshape(x[0].shape())?)],
        Op::LogSoftmax => {
            let c = x[0].shape()[1];
            let probs = x[0].log_softmax()?.exp();
            let row_totals = g.sum_rows()?.repeat_cols(c)?;
            vec![Some(g.sub(&probs.mul(&row_totals)?)?)]
        }
        Op::Custom(op) => vec![Some(op.backward(&x[0], g)?)],
    };
    Ok(out)
}
