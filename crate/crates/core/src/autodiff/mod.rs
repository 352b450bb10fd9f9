//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Backward rules
//! are written in terms of the same taped operations, so with
//! `create_graph` the gradients are themselves differentiable nodes and a
//! second [`Tape::backward`] yields second-order derivatives (this is what
//! the R1 penalty needs).
//!
//! Operations on the generator path that only ever need first-order
//! gradients (modulation, sampled/deformable convolution) compute their
//! gradients with dedicated kernels; traversing them under `create_graph`
//! is reported as a contract error rather than silently truncating the
//! graph.
//!
//! ```
//! use mtm_core::autodiff::Tape;
//! use mtm_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss, &[x], false).unwrap();
//! assert_eq!(tape.value(grads.get(x).unwrap()).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod ops;

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{finite_diff_check, numeric_gradient, relative_error};
pub use ops::softplus;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Broadcast(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sin(usize),
    Cos(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    AddChannelBias(usize, usize),
    SumChannels(usize),
    BroadcastChannels(usize),
    Upsample2x(usize),
    AvgPool2x2(usize),
    ConcatMid { a: usize, b: usize },
    SliceMid { x: usize, start: usize },
    PadMid { x: usize, start: usize },
    Gather { x: usize, indices: Vec<usize> },
    ScatterAdd { x: usize, indices: Vec<usize> },
    Conv { x: usize, w: usize },
    ConvTranspose { g: usize, w: usize },
    ConvWeightGrad { x: usize, g: usize },
    SampledConv { x: usize, w: usize, offsets: Option<usize> },
    Modulate { w: usize, s: usize, eps: f64, demodulate: bool },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Broadcast(..) => "broadcast",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Reshape(..) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::SumChannels(..) => "sum_channels",
            Op::BroadcastChannels(..) => "broadcast_channels",
            Op::Upsample2x(..) => "upsample2x",
            Op::AvgPool2x2(..) => "avg_pool2x2",
            Op::ConcatMid { .. } => "concat",
            Op::SliceMid { .. } => "slice",
            Op::PadMid { .. } => "pad",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Conv { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv_transpose2d",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::SampledConv { .. } => "sampled_conv2d",
            Op::Modulate { .. } => "modulate_demodulate",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChannelBias(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumChannels(a)
            | Op::Upsample2x(a)
            | Op::AvgPool2x2(a) => vec![a],
            Op::Broadcast(a) | Op::Reshape(a) | Op::BroadcastChannels(a) => vec![a],
            Op::ConcatMid { a, b } => vec![a, b],
            Op::SliceMid { x, .. } | Op::PadMid { x, .. } => vec![x],
            Op::Gather { x, .. } | Op::ScatterAdd { x, .. } => vec![x],
            Op::Conv { x, w } => vec![x, w],
            Op::ConvTranspose { g, w } => vec![g, w],
            Op::ConvWeightGrad { x, g } => vec![x, g],
            Op::SampledConv { x, w, offsets } => {
                let mut v = vec![x, w];
                v.extend(offsets);
                v
            }
            Op::Modulate { w, s, .. } => vec![w, s],
        }
    }

    /// Whether the backward rule is expressed in taped operations.
    fn twice_differentiable(&self) -> bool {
        !matches!(self, Op::SampledConv { .. } | Op::Modulate { .. })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. One tape per forward/backward computation; a tape is
/// single-threaded and cheap to drop.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only: every result is a constant.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires = self.grad_enabled;
        self.push_node(value, Op::Leaf, requires)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.check(v)?].requires_grad)
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> Result<&'static str> {
        Ok(self.nodes[self.check(v)?].op.name())
    }

    /// Recorded inputs of `v` (empty for leaves and constants).
    pub fn inputs(&self, v: Var) -> Result<Vec<Var>> {
        let i = self.check(v)?;
        Ok(self.nodes[i].op.inputs().into_iter().map(|j| self.var(j)).collect())
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape(format!("variable {} belongs to another tape", v.idx)));
        }
        let i = v.idx as usize;
        if i >= self.nodes.len() {
            return Err(Error::Tape(format!("unknown node id {i}")));
        }
        Ok(i)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Appends the result of `op`. Inputs must already be on the tape; the
    /// node is differentiable iff recording is on and some input is.
    pub(crate) fn record(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let inputs = op.inputs();
        let mut requires = false;
        for &i in &inputs {
            if i >= self.nodes.len() {
                return Err(Error::Tape(format!("unknown input id {i}")));
            }
            requires |= self.nodes[i].requires_grad;
        }
        let requires = requires && self.grad_enabled;
        let op = if requires { op } else { Op::Leaf };
        Ok(self.push_node(value, op, requires))
    }

    pub(crate) fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Gradients of the scalar `loss` with respect to `leaves`.
    ///
    /// With `create_graph` every backward step is recorded, so the returned
    /// gradients can be differentiated again. Leaves without a path to the
    /// loss get zero gradients.
    pub fn backward(&mut self, loss: Var, leaves: &[Var], create_graph: bool) -> Result<Gradients> {
        let loss_idx = self.check(loss)?;
        if self.nodes[loss_idx].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss_idx].value.shape()
            )));
        }
        let mut leaf_ids = Vec::with_capacity(leaves.len());
        for &l in leaves {
            leaf_ids.push(self.check(l)?);
        }

        // Nodes that lie on a path from a requested leaf.
        let end = loss_idx + 1;
        let mut needed = vec![false; end];
        for &l in &leaf_ids {
            if l < end {
                needed[l] = true;
            }
        }
        for i in 0..end {
            if !needed[i] && self.nodes[i].requires_grad {
                needed[i] = self.nodes[i].op.inputs().iter().any(|&j| needed[j]);
            }
        }

        let saved_mode = self.grad_enabled;
        self.grad_enabled = create_graph;
        let result = self.sweep(loss_idx, &needed, create_graph);
        self.grad_enabled = saved_mode;
        let mut grads = result?;

        let mut entries = Vec::with_capacity(leaves.len());
        for (&leaf, &li) in leaves.iter().zip(&leaf_ids) {
            let g = match grads.get_mut(li).and_then(Option::take) {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.nodes[li].value.shape());
                    self.constant(z)
                }
            };
            // Put it back so repeated leaves resolve to the same node.
            if li < grads.len() {
                grads[li] = Some(g);
            }
            entries.push((leaf, g));
        }
        Ok(Gradients { entries })
    }

    fn sweep(&mut self, loss_idx: usize, needed: &[bool], create_graph: bool) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; loss_idx + 1];
        if !needed[loss_idx] {
            return Ok(grads);
        }
        let seed_shape = self.nodes[loss_idx].value.shape().to_vec();
        grads[loss_idx] = Some(self.constant(Tensor::full(&seed_shape, 1.0)));
        for i in (0..=loss_idx).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            if create_graph && !op.twice_differentiable() {
                return Err(Error::Contract(format!(
                    "second-order gradients through {} are not supported",
                    op.name()
                )));
            }
            let inputs = op.inputs();
            let need: Vec<bool> = inputs.iter().map(|&j| needed[j]).collect();
            let contributions = self.backward_rule(i, &op, g, &need)?;
            for (j, gj) in inputs.into_iter().zip(contributions) {
                let Some(gj) = gj else { continue };
                if !needed[j] {
                    continue;
                }
                grads[j] = Some(match grads[j] {
                    None => gj,
                    Some(prev) => self.add(prev, gj)?,
                });
            }
        }
        Ok(grads)
    }
}

/// Gradient of a loss with respect to each requested leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(Var, Var)>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<Var> {
        self.entries.iter().find(|(l, _)| *l == leaf).map(|(_, g)| *g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
