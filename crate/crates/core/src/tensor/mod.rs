//! Dense-tensor numerics with reverse-mode differentiation.
//!
//! A [`Tape`] evaluates primitives eagerly and records enough to replay the
//! backward pass. Training instantiates the tape with `f32`; gradient checks
//! run the identical code in `f64`.

mod elem;
pub mod checkpoint;
pub mod optim;
pub mod program;

pub use elem::Elem;
pub use program::{evaluate_graph, Prim, Program, Ref};

use thiserror::Error;

use crate::rng::Stream;

pub type NodeId = usize;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Exported view of one graph node, mirroring the public tensor contract.
#[derive(Debug, Clone)]
pub struct Tensor<E: Elem> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
    pub node_id: NodeId,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, b: NodeId },
    MulBias { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Huber { a: NodeId, kappa: f64 },
    Min { a: NodeId, b: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    SoftmaxLast { a: NodeId },
    LogSoftmaxLast { a: NodeId },
    LogSumExpLast { a: NodeId },
    LayerNormLast { a: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize, end: usize },
    Sum { a: NodeId },
    Mean { a: NodeId },
    MeanAxis0 { a: NodeId },
    SumLast { a: NodeId },
    GatherRows { a: NodeId, ids: Vec<usize> },
    MaskedFill { a: NodeId, mask: Vec<bool> },
    Dropout { a: NodeId, mask: Vec<bool>, scale: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add-bias",
            Op::MulBias { .. } => "mul-bias",
            Op::Sub { .. } => "subtract",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "divide",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add-const",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "log",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Huber { .. } => "huber",
            Op::Min { .. } => "min",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxLast { .. } => "softmax",
            Op::LogSoftmaxLast { .. } => "log-softmax",
            Op::LogSumExpLast { .. } => "logsumexp",
            Op::LayerNormLast { .. } => "layer-norm",
            Op::Embedding { .. } => "embedding-lookup",
            Op::ConcatRows { .. } => "concatenate",
            Op::SliceRows { .. } => "slice",
            Op::SliceCols { .. } => "slice-cols",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanAxis0 { .. } => "mean-axis0",
            Op::SumLast { .. } => "sum-last",
            Op::GatherRows { .. } => "gather-rows",
            Op::MaskedFill { .. } => "masked-fill",
            Op::Dropout { .. } => "dropout",
        }
    }
}

pub struct Tape<E: Elem> {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<E>>,
    requires: Vec<bool>,
    grads: Vec<Vec<E>>,
    pub train: bool,
    finite_checks: bool,
    dropout_rng: Option<Stream>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            train: false,
            finite_checks: false,
            dropout_rng: None,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.finite_checks = on;
        self
    }

    pub fn train_mode(mut self, train: bool, dropout_rng: Option<Stream>) -> Self {
        self.train = train;
        self.dropout_rng = dropout_rng;
        self
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn value(&self, id: NodeId) -> &[E] {
        &self.values[id]
    }

    /// Gradient of a node, if backward has reached it. Empty slice otherwise.
    pub fn grad(&self, id: NodeId) -> &[E] {
        &self.grads[id]
    }

    pub fn export(&self, id: NodeId) -> Tensor<E> {
        Tensor {
            shape: self.shapes[id].clone(),
            data: self.values[id].clone(),
            requires_grad: self.requires[id],
            grad: if self.grads[id].is_empty() {
                None
            } else {
                Some(self.grads[id].clone())
            },
            node_id: id,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<E>, requires: bool) -> Result<NodeId> {
        debug_assert_eq!(numel(&shape), value.len());
        let id = self.ops.len();
        if self.finite_checks && value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.ops.push(op);
        self.shapes.push(shape);
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(Vec::new());
        Ok(id)
    }

    fn req2(&self, a: NodeId, b: NodeId) -> bool {
        self.requires[a] || self.requires[b]
    }

    // ---- leaves ------------------------------------------------------------

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> NodeId {
        if numel(&shape) != data.len() {
            panic!(
                "input data length {} does not match shape {:?}",
                data.len(),
                shape
            );
        }
        self.push(Op::Input, shape, data, requires_grad)
            .expect("input push")
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<E>) -> NodeId {
        self.input(shape, data, false)
    }

    pub fn scalar(&mut self, v: E) -> NodeId {
        self.input(vec![1], vec![v], false)
    }

    // ---- binary ops --------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[b]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        matmul_acc(&self.values[a], &self.values[b], m, k, n, &mut out);
        let req = self.req2(a, b);
        self.push(Op::MatMul { a, b }, vec![m, n], out, req)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(E, E) -> E,
        op: Op,
    ) -> Result<NodeId> {
        if self.shapes[a] != self.shapes[b] {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shapes[a], self.shapes[b]),
            });
        }
        let out: Vec<E> = self.values[a]
            .iter()
            .zip(&self.values[b])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shapes[a].clone();
        let req = self.req2(a, b);
        self.push(op, shape, out, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("subtract", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("divide", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("min", a, b, |x, y| x.minimum(y), Op::Min { a, b })
    }

    /// Add a rank-1 bias over the last axis of `a`.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = last_dim(&self.shapes[a]);
        if self.shapes[b].len() != 1 || self.shapes[b][0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "add-bias",
                detail: format!("{:?} + bias {:?}", self.shapes[a], self.shapes[b]),
            });
        }
        let bias = self.values[b].clone();
        let out: Vec<E> = self.values[a]
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&bias).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shapes[a].clone();
        let req = self.req2(a, b);
        self.push(Op::AddBias { a, b }, shape, out, req)
    }

    /// Multiply each row of `a` elementwise by a rank-1 vector over the last
    /// axis (layer-norm gain and similar broadcasts).
    pub fn mul_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = last_dim(&self.shapes[a]);
        if self.shapes[b].len() != 1 || self.shapes[b][0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "mul-bias",
                detail: format!("{:?} * gain {:?}", self.shapes[a], self.shapes[b]),
            });
        }
        let gain = self.values[b].clone();
        let out: Vec<E> = self.values[a]
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&gain).map(|(&x, &y)| x * y))
            .collect();
        let shape = self.shapes[a].clone();
        let req = self.req2(a, b);
        self.push(Op::MulBias { a, b }, shape, out, req)
    }

    // ---- unary ops ---------------------------------------------------------

    fn map_op(&mut self, a: NodeId, f: impl Fn(E) -> E, op: Op) -> Result<NodeId> {
        let out: Vec<E> = self.values[a].iter().map(|&x| f(x)).collect();
        let shape = self.shapes[a].clone();
        let req = self.requires[a];
        self.push(op, shape, out, req)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ce = E::from_f64(c);
        self.map_op(a, |x| x * ce, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ce = E::from_f64(c);
        self.map_op(a, |x| x + ce, Op::AddConst { a })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, |x| x.ln(), Op::Ln { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, |x| x.maximum(E::ZERO), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, gelu_fwd, Op::Gelu { a })
    }

    pub fn huber(&mut self, a: NodeId, kappa: f64) -> Result<NodeId> {
        let k = E::from_f64(kappa);
        let half = E::from_f64(0.5);
        self.map_op(
            a,
            |x| {
                let ax = x.abs();
                if ax <= k {
                    half * x * x
                } else {
                    k * (ax - half * k)
                }
            },
            Op::Huber { a, kappa },
        )
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        self.map_op(a, |x| x.maximum(l).minimum(h), Op::Clamp { a, lo, hi })
    }

    // ---- row-structured ops ------------------------------------------------

    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let d = last_dim(&self.shapes[a]);
        let mut out = self.values[a].clone();
        for row in out.chunks_exact_mut(d) {
            softmax_row(row);
        }
        let shape = self.shapes[a].clone();
        let req = self.requires[a];
        self.push(Op::SoftmaxLast { a }, shape, out, req)
    }

    pub fn log_softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let d = last_dim(&self.shapes[a]);
        let mut out = self.values[a].clone();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().fold(row[0], |acc, &v| acc.maximum(v));
            let mut s = E::ZERO;
            for v in row.iter() {
                s += (*v - m).exp();
            }
            let lse = m + s.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = self.shapes[a].clone();
        let req = self.requires[a];
        self.push(Op::LogSoftmaxLast { a }, shape, out, req)
    }

    pub fn logsumexp_last(&mut self, a: NodeId) -> Result<NodeId> {
        let d = last_dim(&self.shapes[a]);
        let rows = numel(&self.shapes[a]) / d;
        let mut out = Vec::with_capacity(rows);
        for row in self.values[a].chunks_exact(d) {
            let m = row.iter().fold(row[0], |acc, &v| acc.maximum(v));
            let mut s = E::ZERO;
            for v in row {
                s += (*v - m).exp();
            }
            out.push(m + s.ln());
        }
        let req = self.requires[a];
        self.push(Op::LogSumExpLast { a }, vec![rows], out, req)
    }

    /// Normalize the last axis to zero mean / unit variance (pre-affine).
    /// Constant rows normalize to zeros via the epsilon in the denominator.
    pub fn layer_norm_last(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let d = last_dim(&self.shapes[a]);
        let inv_d = E::from_f64(1.0 / d as f64);
        let epse = E::from_f64(eps);
        let mut out = self.values[a].clone();
        for row in out.chunks_exact_mut(d) {
            let mut mean = E::ZERO;
            for v in row.iter() {
                mean += *v;
            }
            mean = mean * inv_d;
            let mut var = E::ZERO;
            for v in row.iter() {
                let c = *v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = E::ONE / (var + epse).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        let shape = self.shapes[a].clone();
        let req = self.requires[a];
        self.push(Op::LayerNormLast { a, eps }, shape, out, req)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = &self.shapes[table];
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding-lookup",
                detail: format!("table shape {st:?}"),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid(format!(
                "embedding id {bad} out of range for table of {v}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.values[table][i * d..(i + 1) * d]);
        }
        let req = self.requires[table];
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            req,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concatenate of zero parts".into()));
        }
        let d = last_dim(&self.shapes[parts[0]]);
        let mut rows = 0;
        for &p in parts {
            if last_dim(&self.shapes[p]) != d || self.shapes[p].len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "concatenate",
                    detail: format!("part shape {:?}, expected [_, {d}]", self.shapes[p]),
                });
            }
            rows += self.shapes[p][0];
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(&self.values[p]);
        }
        let req = parts.iter().any(|&p| self.requires[p]);
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![rows, d],
            out,
            req,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = &self.shapes[a];
        if s.len() != 2 || end > s[0] || start > end {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("rows {start}..{end} of {s:?}"),
            });
        }
        let d = s[1];
        let out = self.values[a][start * d..end * d].to_vec();
        let req = self.requires[a];
        self.push(Op::SliceRows { a, start }, vec![end - start, d], out, req)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = &self.shapes[a];
        if s.len() != 2 || end > s[1] || start > end {
            return Err(TensorError::ShapeMismatch {
                op: "slice-cols",
                detail: format!("cols {start}..{end} of {s:?}"),
            });
        }
        let (rows, d) = (s[0], s[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&self.values[a][r * d + start..r * d + end]);
        }
        let req = self.requires[a];
        self.push(Op::SliceCols { a, start, end }, vec![rows, w], out, req)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.shapes[a];
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("{s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.values[a];
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let req = self.requires[a];
        self.push(Op::Transpose { a }, vec![n, m], out, req)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != numel(&self.shapes[a]) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shapes[a]),
            });
        }
        let out = self.values[a].clone();
        let req = self.requires[a];
        self.push(Op::Reshape { a }, shape, out, req)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = E::ZERO;
        for v in &self.values[a] {
            s += *v;
        }
        let req = self.requires[a];
        self.push(Op::Sum { a }, vec![1], vec![s], req)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.values[a].len();
        let mut s = E::ZERO;
        for v in &self.values[a] {
            s += *v;
        }
        let req = self.requires[a];
        self.push(
            Op::Mean { a },
            vec![1],
            vec![s * E::from_f64(1.0 / n as f64)],
            req,
        )
    }

    /// Column-wise mean over rows of a rank-2 tensor.
    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.shapes[a];
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "mean-axis0",
                detail: format!("{s:?}"),
            });
        }
        let (rows, d) = (s[0], s[1]);
        let mut out = vec![E::ZERO; d];
        for row in self.values[a].chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let inv = E::from_f64(1.0 / rows as f64);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let req = self.requires[a];
        self.push(Op::MeanAxis0 { a }, vec![d], out, req)
    }

    /// Sum over the last axis, yielding one value per row.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let d = last_dim(&self.shapes[a]);
        let rows = numel(&self.shapes[a]) / d;
        let mut out = Vec::with_capacity(rows);
        for row in self.values[a].chunks_exact(d) {
            let mut s = E::ZERO;
            for v in row {
                s += *v;
            }
            out.push(s);
        }
        let req = self.requires[a];
        self.push(Op::SumLast { a }, vec![rows], out, req)
    }

    /// out[i] = a[i, ids[i]] for a rank-2 input.
    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = &self.shapes[a];
        if s.len() != 2 || ids.len() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "gather-rows",
                detail: format!("{} ids for shape {s:?}", ids.len()),
            });
        }
        let d = s[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= d) {
            return Err(TensorError::Invalid(format!(
                "gather id {bad} out of range for row width {d}"
            )));
        }
        let out: Vec<E> = ids
            .iter()
            .enumerate()
            .map(|(r, &c)| self.values[a][r * d + c])
            .collect();
        let req = self.requires[a];
        self.push(
            Op::GatherRows {
                a,
                ids: ids.to_vec(),
            },
            vec![s[0]],
            out,
            req,
        )
    }

    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], value: f64) -> Result<NodeId> {
        if mask.len() != self.values[a].len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked-fill",
                detail: format!(
                    "mask of {} for tensor of {}",
                    mask.len(),
                    self.values[a].len()
                ),
            });
        }
        let ve = E::from_f64(value);
        let out: Vec<E> = self.values[a]
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { ve } else { x })
            .collect();
        let shape = self.shapes[a].clone();
        let req = self.requires[a];
        self.push(
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            shape,
            out,
            req,
        )
    }

    /// Inverted dropout. Identity when the tape is not in train mode.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if !self.train || p <= 0.0 {
            return self.scale(a, 1.0);
        }
        let rng = self
            .dropout_rng
            .as_mut()
            .ok_or_else(|| TensorError::Invalid("dropout in train mode needs an rng stream".into()))?;
        let mask: Vec<bool> = (0..self.values[a].len())
            .map(|_| rng.uniform() >= p)
            .collect();
        let scale = 1.0 / (1.0 - p);
        let se = E::from_f64(scale);
        let out: Vec<E> = self.values[a]
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * se } else { E::ZERO })
            .collect();
        let shape = self.shapes[a].clone();
        let req = self.requires[a];
        self.push(Op::Dropout { a, mask, scale }, shape, out, req)
    }

    // ---- backward ----------------------------------------------------------

    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.clear();
        }
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<E> {
        if self.grads[id].is_empty() {
            self.grads[id] = vec![E::ZERO; self.values[id].len()];
        }
        &mut self.grads[id]
    }

    /// Accumulate gradients of all `requires_grad` ancestors of a scalar output.
    /// Repeated calls without [`Tape::reset_grads`] accumulate additively.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if numel(&self.shapes[output]) != 1 {
            return Err(TensorError::NonScalarOutput(self.shapes[output].clone()));
        }
        if !self.values[output][0].is_finite() {
            return Err(TensorError::NonFinite {
                node: output,
                op: self.ops[output].name(),
            });
        }
        // Local upstream buffers; final leaf gradients land in self.grads.
        let mut up: Vec<Vec<E>> = vec![Vec::new(); output + 1];
        up[output] = vec![E::ONE];
        for id in (0..=output).rev() {
            if up[id].is_empty() || !self.requires[id] {
                continue;
            }
            let g = std::mem::take(&mut up[id]);
            // Persistent gradients are only ever read for leaves; skip the
            // store for intermediates to avoid a second full-size buffer.
            if matches!(self.ops[id], Op::Input) {
                let buf = self.grad_buf(id);
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += *v;
                }
            }
            self.propagate(id, &g, &mut up);
        }
        Ok(())
    }

    fn add_up(up: &mut [Vec<E>], id: NodeId, len: usize, f: impl FnOnce(&mut [E])) {
        if up[id].is_empty() {
            up[id] = vec![E::ZERO; len];
        }
        f(&mut up[id]);
    }

    fn propagate(&self, id: NodeId, g: &[E], up: &mut [Vec<E>]) {
        let op = self.ops[id].clone();
        match op {
            Op::Input => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shapes[a][0], self.shapes[a][1]);
                let n = self.shapes[b][1];
                if self.requires[a] {
                    // dA += g . B^T, via the shared kernel on a materialized
                    // transpose (the copy is cheaper than a strided inner loop).
                    let bv = &self.values[b];
                    let mut bt = vec![E::ZERO; k * n];
                    for kk in 0..k {
                        for j in 0..n {
                            bt[j * k + kk] = bv[kk * n + j];
                        }
                    }
                    Self::add_up(up, a, m * k, |da| {
                        matmul_acc(g, &bt, m, n, k, da);
                    });
                }
                if self.requires[b] {
                    // dB += A^T . g
                    let av = &self.values[a];
                    let mut at = vec![E::ZERO; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            at[kk * m + i] = av[i * k + kk];
                        }
                    }
                    Self::add_up(up, b, k * n, |db| {
                        matmul_acc(&at, g, k, m, n, db);
                    });
                }
            }
            Op::Transpose { a } => {
                let (n, m) = (self.shapes[id][0], self.shapes[id][1]);
                Self::add_up(up, a, m * n, |da| {
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Reshape { a } | Op::Scale { a, .. } | Op::AddConst { a, .. } => {
                let c = match self.ops[id] {
                    Op::Scale { c, .. } => c,
                    Op::Reshape { .. } | Op::AddConst { .. } => 1.0,
                    _ => unreachable!(),
                };
                let ce = E::from_f64(c);
                Self::add_up(up, a, g.len(), |da| {
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += *x * ce;
                    }
                });
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if self.requires[t] {
                        Self::add_up(up, t, g.len(), |dt| {
                            for (d, x) in dt.iter_mut().zip(g) {
                                *d += *x;
                            }
                        });
                    }
                }
            }
            Op::AddBias { a, b } => {
                if self.requires[a] {
                    Self::add_up(up, a, g.len(), |da| {
                        for (d, x) in da.iter_mut().zip(g) {
                            *d += *x;
                        }
                    });
                }
                if self.requires[b] {
                    let d = self.shapes[b][0];
                    Self::add_up(up, b, d, |db| {
                        for row in g.chunks_exact(d) {
                            for (dv, x) in db.iter_mut().zip(row) {
                                *dv += *x;
                            }
                        }
                    });
                }
            }
            Op::MulBias { a, b } => {
                let d = self.shapes[b][0];
                if self.requires[a] {
                    let gain = &self.values[b];
                    Self::add_up(up, a, g.len(), |da| {
                        for (dr, gr) in da.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                            for ((dv, x), y) in dr.iter_mut().zip(gr).zip(gain) {
                                *dv += *x * *y;
                            }
                        }
                    });
                }
                if self.requires[b] {
                    let av = &self.values[a];
                    Self::add_up(up, b, d, |db| {
                        for (gr, ar) in g.chunks_exact(d).zip(av.chunks_exact(d)) {
                            for ((dv, x), y) in db.iter_mut().zip(gr).zip(ar) {
                                *dv += *x * *y;
                            }
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                if self.requires[a] {
                    Self::add_up(up, a, g.len(), |da| {
                        for (d, x) in da.iter_mut().zip(g) {
                            *d += *x;
                        }
                    });
                }
                if self.requires[b] {
                    Self::add_up(up, b, g.len(), |db| {
                        for (d, x) in db.iter_mut().zip(g) {
                            *d += -*x;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.requires[a] {
                    let bv = &self.values[b];
                    Self::add_up(up, a, g.len(), |da| {
                        for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                            *d += *x * *y;
                        }
                    });
                }
                if self.requires[b] {
                    let av = &self.values[a];
                    Self::add_up(up, b, g.len(), |db| {
                        for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                            *d += *x * *y;
                        }
                    });
                }
            }
            Op::Div { a, b } => {
                let bv = &self.values[b];
                if self.requires[a] {
                    Self::add_up(up, a, g.len(), |da| {
                        for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                            *d += *x / *y;
                        }
                    });
                }
                if self.requires[b] {
                    let av = &self.values[a];
                    Self::add_up(up, b, g.len(), |db| {
                        for (((d, x), y), z) in db.iter_mut().zip(g).zip(av).zip(bv) {
                            *d += -(*x * *y) / (*z * *z);
                        }
                    });
                }
            }
            Op::Min { a, b } => {
                let (av, bv) = (&self.values[a], &self.values[b]);
                if self.requires[a] {
                    Self::add_up(up, a, g.len(), |da| {
                        for (i, (d, x)) in da.iter_mut().zip(g).enumerate() {
                            if av[i] <= bv[i] {
                                *d += *x;
                            }
                        }
                    });
                }
                if self.requires[b] {
                    Self::add_up(up, b, g.len(), |db| {
                        for (i, (d, x)) in db.iter_mut().zip(g).enumerate() {
                            if bv[i] < av[i] {
                                *d += *x;
                            }
                        }
                    });
                }
            }
            Op::Clamp { a, lo, hi } => {
                let (l, h) = (E::from_f64(lo), E::from_f64(hi));
                let av = &self.values[a];
                Self::add_up(up, a, g.len(), |da| {
                    for (i, (d, x)) in da.iter_mut().zip(g).enumerate() {
                        if av[i] >= l && av[i] <= h {
                            *d += *x;
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let yv = &self.values[id];
                Self::add_up(up, a, g.len(), |da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(yv) {
                        *d += *x * *y;
                    }
                });
            }
            Op::Ln { a } => {
                let av = &self.values[a];
                Self::add_up(up, a, g.len(), |da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(av) {
                        *d += *x / *y;
                    }
                });
            }
            Op::Tanh { a } => {
                let yv = &self.values[id];
                Self::add_up(up, a, g.len(), |da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(yv) {
                        *d += *x * (E::ONE - *y * *y);
                    }
                });
            }
            Op::Relu { a } => {
                let av = &self.values[a];
                Self::add_up(up, a, g.len(), |da| {
                    for (i, (d, x)) in da.iter_mut().zip(g).enumerate() {
                        if av[i] > E::ZERO {
                            *d += *x;
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let av = &self.values[a];
                Self::add_up(up, a, g.len(), |da| {
                    for (i, (d, x)) in da.iter_mut().zip(g).enumerate() {
                        *d += *x * gelu_bwd(av[i]);
                    }
                });
            }
            Op::Huber { a, kappa } => {
                let k = E::from_f64(kappa);
                let av = &self.values[a];
                Self::add_up(up, a, g.len(), |da| {
                    for (i, (d, x)) in da.iter_mut().zip(g).enumerate() {
                        let u = av[i];
                        let du = if u.abs() <= k {
                            u
                        } else if u > E::ZERO {
                            k
                        } else {
                            -k
                        };
                        *d += *x * du;
                    }
                });
            }
            Op::SoftmaxLast { a } => {
                let d = last_dim(&self.shapes[id]);
                let yv = &self.values[id];
                Self::add_up(up, a, g.len(), |da| {
                    for ((dr, gr), yr) in da
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(yv.chunks_exact(d))
                    {
                        let mut dot = E::ZERO;
                        for (x, y) in gr.iter().zip(yr) {
                            dot += *x * *y;
                        }
                        for ((dv, x), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += *y * (*x - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxLast { a } => {
                let d = last_dim(&self.shapes[id]);
                let yv = &self.values[id];
                Self::add_up(up, a, g.len(), |da| {
                    for ((dr, gr), yr) in da
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(yv.chunks_exact(d))
                    {
                        let mut gsum = E::ZERO;
                        for x in gr {
                            gsum += *x;
                        }
                        for ((dv, x), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += *x - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::LogSumExpLast { a } => {
                let d = last_dim(&self.shapes[a]);
                let av = &self.values[a];
                let yv = &self.values[id];
                Self::add_up(up, a, av.len(), |da| {
                    for (r, (dr, ar)) in da
                        .chunks_exact_mut(d)
                        .zip(av.chunks_exact(d))
                        .enumerate()
                    {
                        let lse = yv[r];
                        for (dv, x) in dr.iter_mut().zip(ar) {
                            *dv += g[r] * (*x - lse).exp();
                        }
                    }
                });
            }
            Op::LayerNormLast { a, eps } => {
                let d = last_dim(&self.shapes[id]);
                let inv_d = E::from_f64(1.0 / d as f64);
                let epse = E::from_f64(eps);
                let av = &self.values[a];
                Self::add_up(up, a, g.len(), |da| {
                    for ((dr, gr), ar) in da
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(av.chunks_exact(d))
                    {
                        let mut mean = E::ZERO;
                        for v in ar {
                            mean += *v;
                        }
                        mean = mean * inv_d;
                        let mut var = E::ZERO;
                        for v in ar {
                            let c = *v - mean;
                            var += c * c;
                        }
                        var = var * inv_d;
                        let inv_std = E::ONE / (var + epse).sqrt();
                        let mut gsum = E::ZERO;
                        let mut gdot = E::ZERO;
                        for (x, v) in gr.iter().zip(ar) {
                            gsum += *x;
                            gdot += *x * (*v - mean);
                        }
                        let c1 = gsum * inv_d;
                        let c2 = gdot * inv_d * inv_std * inv_std;
                        for ((dv, x), v) in dr.iter_mut().zip(gr).zip(ar) {
                            let xc = *v - mean;
                            *dv += inv_std * (*x - c1 - xc * c2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shapes[table][1];
                let tl = self.values[table].len();
                Self::add_up(up, table, tl, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let tr = &mut dt[i * d..(i + 1) * d];
                        for (t, x) in tr.iter_mut().zip(gr) {
                            *t += *x;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let d = last_dim(&self.shapes[id]);
                let mut offset = 0;
                for p in parts {
                    let rows = self.shapes[p][0];
                    let span = rows * d;
                    if self.requires[p] {
                        let gr = &g[offset..offset + span];
                        Self::add_up(up, p, span, |dp| {
                            for (dv, x) in dp.iter_mut().zip(gr) {
                                *dv += *x;
                            }
                        });
                    }
                    offset += span;
                }
            }
            Op::SliceRows { a, start, .. } => {
                let d = self.shapes[a][1];
                let al = self.values[a].len();
                Self::add_up(up, a, al, |da| {
                    for (dv, x) in da[start * d..start * d + g.len()].iter_mut().zip(g) {
                        *dv += *x;
                    }
                });
            }
            Op::SliceCols { a, start, end } => {
                let (rows, d) = (self.shapes[a][0], self.shapes[a][1]);
                let w = end - start;
                Self::add_up(up, a, rows * d, |da| {
                    for r in 0..rows {
                        for j in 0..w {
                            da[r * d + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let al = self.values[a].len();
                Self::add_up(up, a, al, |da| {
                    for dv in da.iter_mut() {
                        *dv += g[0];
                    }
                });
            }
            Op::Mean { a } => {
                let al = self.values[a].len();
                let inv = E::from_f64(1.0 / al as f64);
                Self::add_up(up, a, al, |da| {
                    for dv in da.iter_mut() {
                        *dv += g[0] * inv;
                    }
                });
            }
            Op::MeanAxis0 { a } => {
                let (rows, d) = (self.shapes[a][0], self.shapes[a][1]);
                let inv = E::from_f64(1.0 / rows as f64);
                Self::add_up(up, a, rows * d, |da| {
                    for dr in da.chunks_exact_mut(d) {
                        for (dv, x) in dr.iter_mut().zip(g) {
                            *dv += *x * inv;
                        }
                    }
                });
            }
            Op::SumLast { a } => {
                let d = last_dim(&self.shapes[a]);
                let al = self.values[a].len();
                Self::add_up(up, a, al, |da| {
                    for (r, dr) in da.chunks_exact_mut(d).enumerate() {
                        for dv in dr.iter_mut() {
                            *dv += g[r];
                        }
                    }
                });
            }
            Op::GatherRows { a, ids } => {
                let d = self.shapes[a][1];
                let al = self.values[a].len();
                Self::add_up(up, a, al, |da| {
                    for (r, &c) in ids.iter().enumerate() {
                        da[r * d + c] += g[r];
                    }
                });
            }
            Op::MaskedFill { a, mask, .. } => {
                Self::add_up(up, a, g.len(), |da| {
                    for (i, (dv, x)) in da.iter_mut().zip(g).enumerate() {
                        if !mask[i] {
                            *dv += *x;
                        }
                    }
                });
            }
            Op::Dropout { a, mask, scale } => {
                let se = E::from_f64(scale);
                Self::add_up(up, a, g.len(), |da| {
                    for (i, (dv, x)) in da.iter_mut().zip(g).enumerate() {
                        if mask[i] {
                            *dv += *x * se;
                        }
                    }
                });
            }
        }
    }
}

// ---- kernels ----------------------------------------------------------------

/// out += a @ b for row-major [m,k] x [k,n].
pub fn matmul_acc<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

pub fn softmax_row<E: Elem>(row: &mut [E]) {
    let m = row.iter().fold(row[0], |acc, &v| acc.maximum(v));
    let mut s = E::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = E::ONE / s;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)

pub fn gelu_fwd<E: Elem>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(0.044715);
    let inner = c * (x + a * x * x * x);
    half * x * (E::ONE + inner.tanh())
}

fn gelu_bwd<E: Elem>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(0.044715);
    let three_a = E::from_f64(3.0 * 0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (E::ONE + three_a * x * x);
    half * (E::ONE + t) + half * x * (E::ONE - t * t) * dinner
}

pub mod gradcheck;
