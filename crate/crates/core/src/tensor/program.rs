//! Data-driven primitive sequences. A [`Program`] names a computation as a
//! list of primitives over earlier results; [`evaluate_graph`] runs it on a
//! tape with finite checks enabled and reports failures by primitive index.

use serde::{Deserialize, Serialize};

use super::{Elem, NodeId, Result, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum Ref {
    /// External input by position.
    Input(usize),
    /// Result of an earlier primitive by position.
    Node(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Prim {
    MatMul(Ref, Ref),
    Transpose(Ref),
    Reshape(Ref, Vec<usize>),
    Add(Ref, Ref),
    AddBias(Ref, Ref),
    Sub(Ref, Ref),
    Mul(Ref, Ref),
    Div(Ref, Ref),
    Scale(Ref, f64),
    Exp(Ref),
    Ln(Ref),
    Tanh(Ref),
    Relu(Ref),
    Gelu(Ref),
    SoftmaxLast(Ref),
    LogSoftmaxLast(Ref),
    LayerNormLast(Ref, f64),
    ConcatRows(Vec<Ref>),
    SliceRows(Ref, usize, usize),
    Sum(Ref),
    Mean(Ref),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Program {
    pub prims: Vec<Prim>,
    pub outputs: Vec<Ref>,
}

fn resolve(r: Ref, inputs: &[NodeId], nodes: &[NodeId], at: usize) -> Result<NodeId> {
    match r {
        Ref::Input(i) => inputs.get(i).copied().ok_or_else(|| {
            TensorError::Invalid(format!("primitive {at}: input {i} out of range"))
        }),
        Ref::Node(i) => {
            if i >= at {
                return Err(TensorError::Invalid(format!(
                    "primitive {at}: forward reference to node {i}"
                )));
            }
            nodes.get(i).copied().ok_or_else(|| {
                TensorError::Invalid(format!("primitive {at}: node {i} out of range"))
            })
        }
    }
}

/// Evaluate a program over concrete inputs. Shape errors and non-finite values
/// are reported with the offending primitive index.
pub fn evaluate_graph<E: Elem>(program: &Program, inputs: &[Tensor<E>]) -> Result<Vec<Tensor<E>>> {
    let mut tape: Tape<E> = Tape::new().with_finite_checks(true);
    let input_ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.input(t.shape.clone(), t.data.clone(), false))
        .collect();

    let mut nodes: Vec<NodeId> = Vec::with_capacity(program.prims.len());
    for (k, prim) in program.prims.iter().enumerate() {
        let r = |x: Ref| resolve(x, &input_ids, &nodes, k);
        let res = match prim.clone() {
            Prim::MatMul(a, b) => tape.matmul(r(a)?, r(b)?),
            Prim::Transpose(a) => tape.transpose(r(a)?),
            Prim::Reshape(a, s) => tape.reshape(r(a)?, s),
            Prim::Add(a, b) => tape.add(r(a)?, r(b)?),
            Prim::AddBias(a, b) => tape.add_bias(r(a)?, r(b)?),
            Prim::Sub(a, b) => tape.sub(r(a)?, r(b)?),
            Prim::Mul(a, b) => tape.mul(r(a)?, r(b)?),
            Prim::Div(a, b) => tape.div(r(a)?, r(b)?),
            Prim::Scale(a, c) => tape.scale(r(a)?, c),
            Prim::Exp(a) => tape.exp(r(a)?),
            Prim::Ln(a) => tape.ln(r(a)?),
            Prim::Tanh(a) => tape.tanh(r(a)?),
            Prim::Relu(a) => tape.relu(r(a)?),
            Prim::Gelu(a) => tape.gelu(r(a)?),
            Prim::SoftmaxLast(a) => tape.softmax_last(r(a)?),
            Prim::LogSoftmaxLast(a) => tape.log_softmax_last(r(a)?),
            Prim::LayerNormLast(a, eps) => tape.layer_norm_last(r(a)?, eps),
            Prim::ConcatRows(parts) => {
                let ids: Result<Vec<NodeId>> = parts.into_iter().map(r).collect();
                ids.and_then(|ids| tape.concat_rows(&ids))
            }
            Prim::SliceRows(a, s, e) => tape.slice_rows(r(a)?, s, e),
            Prim::Sum(a) => tape.sum(r(a)?),
            Prim::Mean(a) => tape.mean(r(a)?),
        };
        match res {
            Ok(id) => nodes.push(id),
            Err(TensorError::ShapeMismatch { op, detail }) => {
                return Err(TensorError::Invalid(format!(
                    "primitive {k}: shape mismatch in {op}: {detail}"
                )))
            }
            Err(TensorError::NonFinite { node, op }) => {
                return Err(TensorError::Invalid(format!(
                    "primitive {k}: non-finite value at node {node} ({op})"
                )))
            }
            Err(e) => return Err(e),
        }
    }

    program
        .outputs
        .iter()
        .map(|&o| {
            let id = resolve(o, &input_ids, &nodes, program.prims.len())?;
            Ok(tape.export(id))
        })
        .collect()
}
