//! Define-by-run reverse-mode automatic differentiation.
//!
//! Operations are evaluated eagerly and appended to a [`Tape`]. Because
//! parents are always recorded before their children, node indices are a
//! topological order. [`Tape::grad`] runs a backward sweep producing plain
//! tensors; [`Tape::grad_graph`] runs the same sweep but records every step
//! of it on the tape, so any scalar built from the returned gradients can be
//! differentiated again.

mod backward;
pub mod gradcheck;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::kernels::{self, BinaryKind, ConvGeometry, UnaryKind};
use crate::tensor::{Shape, Tensor, TensorError};

pub use gradcheck::{GradCheck, GradCheckReport};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("backward root must be scalar, got shape {0}")]
    NonScalarRoot(Shape),
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Recorded operation kinds. Attributes needed to evaluate the op (and its
/// adjoint) live inside the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Const,
    Binary(BinaryKind),
    Scale(f64),
    AddConst(f64),
    Unary(UnaryKind),
    MatMul,
    Transpose,
    Conv2d(ConvGeometry),
    ConvInputGrad {
        geom: ConvGeometry,
        input_hw: (usize, usize),
    },
    ConvWeightGrad {
        geom: ConvGeometry,
        kernel_hw: (usize, usize),
    },
    Upsample2x,
    BlockSum2x,
    GlobalAvgPool,
    SpreadPool {
        h: usize,
        w: usize,
    },
    ChannelSum,
    ChannelBroadcast(Shape),
    Concat,
    SliceChannels {
        start: usize,
        len: usize,
    },
    EmbedChannels {
        start: usize,
        total: usize,
    },
    SumAll,
    Expand(Shape),
    Reshape(Shape),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Binary(_) => "binary",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Unary(k) => k.name(),
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::ConvInputGrad { .. } => "conv_input_grad",
            Op::ConvWeightGrad { .. } => "conv_weight_grad",
            Op::Upsample2x => "upsample2x",
            Op::BlockSum2x => "block_sum2x",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SpreadPool { .. } => "spread_pool",
            Op::ChannelSum => "channel_sum",
            Op::ChannelBroadcast(_) => "channel_broadcast",
            Op::Concat => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::EmbedChannels { .. } => "embed_channels",
            Op::SumAll => "sum_all",
            Op::Expand(_) => "expand",
            Op::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf | Op::Const => Some(0),
            Op::Concat => None,
            Op::Binary(_)
            | Op::MatMul
            | Op::Conv2d(_)
            | Op::ConvInputGrad { .. }
            | Op::ConvWeightGrad { .. } => Some(2),
            _ => Some(1),
        }
    }
}

/// Evaluate an op on concrete inputs.
pub(crate) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: n,
                got: inputs.len(),
            });
        }
    }
    let out = match op {
        Op::Leaf | Op::Const => unreachable!("leaves are not evaluated"),
        Op::Binary(kind) => kernels::elementwise(*kind, inputs[0], inputs[1])?,
        Op::Scale(c) => kernels::scale(inputs[0], *c)?,
        Op::AddConst(c) => kernels::add(inputs[0], &Tensor::scalar(*c))?,
        Op::Unary(kind) => kernels::unary(*kind, inputs[0])?,
        Op::MatMul => kernels::matmul(inputs[0], inputs[1])?,
        Op::Transpose => kernels::transpose(inputs[0])?,
        Op::Conv2d(geom) => kernels::conv2d(inputs[0], inputs[1], *geom)?,
        Op::ConvInputGrad { geom, input_hw } => {
            kernels::conv2d_input_grad(inputs[0], inputs[1], *input_hw, *geom)?
        }
        Op::ConvWeightGrad { geom, kernel_hw } => {
            kernels::conv2d_weight_grad(inputs[0], inputs[1], *kernel_hw, *geom)?
        }
        Op::Upsample2x => kernels::upsample2x(inputs[0])?,
        Op::BlockSum2x => kernels::block_sum2x(inputs[0])?,
        Op::GlobalAvgPool => kernels::global_avg_pool(inputs[0])?,
        Op::SpreadPool { h, w } => kernels::spread_pool(inputs[0], *h, *w)?,
        Op::ChannelSum => kernels::channel_sum(inputs[0])?,
        Op::ChannelBroadcast(shape) => kernels::channel_broadcast(inputs[0], shape)?,
        Op::Concat => kernels::concat_channels(inputs)?,
        Op::SliceChannels { start, len } => kernels::slice_channels(inputs[0], *start, *len)?,
        Op::EmbedChannels { start, total } => {
            kernels::embed_channels(inputs[0], *start, *total)?
        }
        Op::SumAll => kernels::sum_all(inputs[0])?,
        Op::Expand(shape) => kernels::expand(inputs[0], shape)?,
        Op::Reshape(shape) => inputs[0].reshape(shape.dims().to_vec())?,
    };
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> Result<&Node> {
        self.check(v)?;
        Ok(&self.nodes[v.index])
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// A differentiable input (parameter or image batch).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, Vec::new(), value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Evaluate `op` on the parents' values and append the result.
    pub fn record(&mut self, op: Op, parents: &[Var]) -> Result<Var> {
        for p in parents {
            self.check(*p)?;
        }
        let idx: Vec<usize> = parents.iter().map(|p| p.index).collect();
        self.record_indices(op, idx)
    }

    pub(crate) fn record_indices(&mut self, op: Op, parents: Vec<usize>) -> Result<Var> {
        let value = {
            let inputs: Vec<&Tensor> = parents.iter().map(|&i| &self.nodes[i].value).collect();
            eval(&op, &inputs)?
        };
        let requires_grad = parents.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, parents, value, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Binary(BinaryKind::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Binary(BinaryKind::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Binary(BinaryKind::Mul), &[a, b])
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Binary(BinaryKind::Max), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::AddConst(c), &[a])
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        self.record(Op::Unary(kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Recip, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, &[a])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        self.record(Op::Conv2d(geom), &[input, kernel])
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Upsample2x, &[a])
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.record(Op::GlobalAvgPool, &[a])
    }

    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::ChannelSum, &[a])
    }

    pub fn channel_broadcast(&mut self, a: Var, like: Var) -> Result<Var> {
        let shape = self.shape(like).clone();
        self.record(Op::ChannelBroadcast(shape), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat, parts)
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceChannels { start, len }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumAll, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = Shape::new(dims)?;
        self.record(Op::Reshape(shape), &[a])
    }

    /// Row sums of a rank-2 tensor (B, C) -> (B).
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.transpose(a)?;
        self.channel_sum(t)
    }

    /// Broadcast a vector (B) across the columns of a (B, C) tensor.
    pub fn row_broadcast(&mut self, a: Var, like: Var) -> Result<Var> {
        let dims = self.shape(like).dims().to_vec();
        let transposed = Shape::new(vec![dims[1], dims[0]])?;
        let b = self.record(Op::ChannelBroadcast(transposed), &[a])?;
        self.transpose(b)
    }

    /// Gradients of scalar `root` with respect to `wrt`, as plain tensors.
    /// Nodes that do not influence `root` get all-zero gradients.
    pub fn grad(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.check_backward(root, wrt)?;
        backward::eager(self, root.index, &indices(wrt))
    }

    /// Like [`Tape::grad`], but every step of the backward pass is recorded,
    /// so the returned gradients are differentiable nodes.
    pub fn grad_graph(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_backward(root, wrt)?;
        let idx = backward::recorded(self, root.index, &indices(wrt))?;
        Ok(idx
            .into_iter()
            .map(|index| Var {
                tape: self.id,
                index,
            })
            .collect())
    }

    /// Backward with an explicit choice of recording. Returns gradient nodes
    /// either way; without recording they are constants.
    pub fn backward(&mut self, root: Var, wrt: &[Var], record: bool) -> Result<Vec<Var>> {
        if record {
            self.grad_graph(root, wrt)
        } else {
            let grads = self.grad(root, wrt)?;
            Ok(grads.into_iter().map(|g| self.constant(g)).collect())
        }
    }

    fn check_backward(&self, root: Var, wrt: &[Var]) -> Result<()> {
        self.check(root)?;
        for w in wrt {
            self.check(*w)?;
        }
        let shape = self.nodes[root.index].value.shape();
        if !shape.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(shape.clone()));
        }
        Ok(())
    }
}

fn indices(vars: &[Var]) -> Vec<usize> {
    vars.iter().map(|v| v.index).collect()
}
