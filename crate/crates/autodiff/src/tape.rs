use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

pub type NodeId = usize;

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Whether the gradients produced by a request must themselves be
/// differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Debug)]
pub struct GradRequest {
    pub output: NodeId,
    pub wrt: Vec<NodeId>,
    pub order: Order,
}

/// Append-only record of a computation.
///
/// Nodes are only ever pushed after their inputs, so the tape is acyclic and
/// node ids are a topological order. A tape is single-writer; use one tape
/// per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf. Any leaf can be differentiated against.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push_value(Op::Leaf, Vec::new(), value))
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id < self.len(), "node {id} is not on this tape");
        Var { tape: self, id }
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn push_value(&self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, inputs, value });
        Var { tape: self, id }
    }

    fn push(&self, op: Op, inputs: &[NodeId]) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let args: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
            ops::forward(&op, &args)?
        };
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        Ok(self.push_value(op, inputs.to_vec(), value))
    }

    /// Recompute every non-leaf node from its inputs and compare with the
    /// stored values. Returns the number of nodes whose replay differs
    /// bit-for-bit (always 0 for a healthy tape).
    pub fn replay_mismatches(&self) -> Result<usize> {
        let nodes = self.nodes.borrow();
        let mut mismatches = 0;
        for node in nodes.iter() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let args: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let again = ops::forward(&node.op, &args)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatches += 1;
            }
        }
        Ok(mismatches)
    }

    /// Gradients of a scalar output with respect to arbitrary nodes.
    ///
    /// `wrt` may name intermediate nodes as well as leaves; the result for a
    /// node is the adjoint of that node. Nodes the output does not depend on
    /// receive zeros. With [`Order::Second`] the backward pass stays on the
    /// tape and the returned gradients can be differentiated again; with
    /// [`Order::First`] the recorded backward nodes are discarded afterwards.
    pub fn grad(&self, req: &GradRequest) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let output = self.var(req.output);
        let wrt: Vec<Var<'_>> = req.wrt.iter().map(|&i| self.var(i)).collect();
        let grads = self.backward(output, &wrt)?;
        let values = grads.iter().map(|g| g.value()).collect();
        if req.order == Order::First {
            self.nodes.borrow_mut().truncate(mark);
        }
        Ok(values)
    }

    /// Differentiable gradients (second-order capable) as tape variables.
    pub fn gradients<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.backward(output, wrt)
    }

    /// First-order gradient values; the backward pass is not kept.
    pub fn gradient_values(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        self.grad(&GradRequest {
            output: output.id,
            wrt: wrt.iter().map(|v| v.id).collect(),
            order: Order::First,
        })
    }

    fn backward<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let out_shape = output.shape();
        if output.value().numel() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_shape));
        }
        let out = output.id;
        let Some(lo) = wrt.iter().map(|v| v.id).min() else {
            return Ok(Vec::new());
        };
        if lo > out {
            return wrt.iter().map(|v| v.zeros_like()).collect();
        }

        // Only nodes that depend on some `wrt` node need adjoints.
        let span = out - lo + 1;
        let mut reach = vec![false; span];
        for v in wrt {
            if v.id <= out {
                reach[v.id - lo] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in lo..=out {
                if !reach[i - lo] {
                    reach[i - lo] = nodes[i].inputs.iter().any(|&j| j >= lo && reach[j - lo]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; span];
        if reach[out - lo] {
            adjoint[out - lo] = Some(self.leaf(Tensor::full(&out_shape, 1.0))?);
        }
        for i in (lo..=out).rev() {
            let Some(g) = adjoint[i - lo] else { continue };
            let inputs = self.nodes.borrow()[i].inputs.clone();
            if inputs.is_empty() {
                continue;
            }
            let needs: Vec<bool> = inputs.iter().map(|&j| j >= lo && reach[j - lo]).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let contributions = self.vjp(i, g, &needs)?;
            for ((&j, need), contribution) in inputs.iter().zip(&needs).zip(contributions) {
                if !need {
                    continue;
                }
                let Some(c) = contribution else { continue };
                let slot = &mut adjoint[j - lo];
                *slot = Some(match *slot {
                    None => c,
                    Some(prev) => prev.add(c)?,
                });
            }
        }

        wrt.iter()
            .map(|v| {
                match v
                    .id
                    .checked_sub(lo)
                    .and_then(|k| adjoint.get(k).copied().flatten())
                {
                    Some(g) if v.id <= out => Ok(g),
                    _ => v.zeros_like(),
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of node `id` for upstream gradient `g`,
    /// expressed with tape primitives. Entries are `None` where `needs` is
    /// false.
    fn vjp<'t>(&'t self, id: NodeId, g: Var<'t>, needs: &[bool]) -> Result<Vec<Option<Var<'t>>>> {
        let (op, inputs) = {
            let nodes = self.nodes.borrow();
            (nodes[id].op.clone(), nodes[id].inputs.clone())
        };
        let x = |k: usize| Var {
            tape: self,
            id: inputs[k],
        };
        let out = Var { tape: self, id };
        let want = |k: usize| needs.get(k).copied().unwrap_or(false);
        let one = |f: &dyn Fn() -> Result<Var<'t>>| -> Result<Vec<Option<Var<'t>>>> {
            Ok(vec![if want(0) { Some(f()?) } else { None }])
        };

        match op {
            Op::Leaf => Ok(Vec::new()),
            Op::Add => Ok(vec![want(0).then_some(g), want(1).then_some(g)]),
            Op::Sub => Ok(vec![
                want(0).then_some(g),
                if want(1) { Some(g.neg()?) } else { None },
            ]),
            Op::Mul => Ok(vec![
                if want(0) { Some(g.mul(x(1))?) } else { None },
                if want(1) { Some(g.mul(x(0))?) } else { None },
            ]),
            Op::Div => Ok(vec![
                if want(0) { Some(g.div(x(1))?) } else { None },
                if want(1) {
                    Some(g.mul(out)?.div(x(1))?.neg()?)
                } else {
                    None
                },
            ]),
            Op::Neg => one(&|| g.neg()),
            Op::Scale(c) => one(&|| g.scale(c)),
            Op::AddScalar(_) => Ok(vec![want(0).then_some(g)]),
            Op::Exp => one(&|| g.mul(out)),
            Op::Log => one(&|| g.div(x(0))),
            Op::Tanh => one(&|| g.mul(out.mul(out)?.neg()?.add_scalar(1.0)?)),
            Op::Sqrt => one(&|| g.div(out)?.scale(0.5)),
            Op::MatMul {
                trans_a,
                trans_b,
                batch,
            } => {
                let (a, b) = (x(0), x(1));
                let (ga, gb) = match (trans_a, trans_b) {
                    (false, false) => ((g, b, false, true), (a, g, true, false)),
                    (false, true) => ((g, b, false, false), (g, a, true, false)),
                    (true, false) => ((b, g, false, true), (a, g, false, false)),
                    (true, true) => ((b, g, true, true), (g, a, true, true)),
                };
                Ok(vec![
                    if want(0) {
                        Some(ga.0.matmul_ex(ga.1, ga.2, ga.3, batch)?)
                    } else {
                        None
                    },
                    if want(1) {
                        Some(gb.0.matmul_ex(gb.1, gb.2, gb.3, batch)?)
                    } else {
                        None
                    },
                ])
            }
            Op::SumAll => one(&|| g.broadcast_scalar(&x(0).shape())),
            Op::BroadcastScalar(_) => one(&|| g.sum()?.reshape(&x(0).shape())),
            Op::SumRows => {
                let m = x(0).shape()[0];
                one(&|| g.broadcast_rows(m))
            }
            Op::BroadcastRows(_) => one(&|| g.sum_rows()),
            Op::SumCols => {
                let shape = x(0).shape();
                let n = shape[shape.len() - 1];
                one(&|| g.broadcast_cols(n))
            }
            Op::BroadcastCols(_) => one(&|| g.sum_cols()),
            Op::Softmax => one(&|| {
                let n = *out.shape().last().unwrap();
                let inner = g.mul(out)?.sum_cols()?.broadcast_cols(n)?;
                out.mul(g.sub(inner)?)
            }),
            Op::LogSoftmax => one(&|| {
                let n = *out.shape().last().unwrap();
                let total = g.sum_cols()?.broadcast_cols(n)?;
                g.sub(out.exp()?.mul(total)?)
            }),
            Op::GatherRows(ids) => {
                let rows = x(0).shape()[0];
                one(&|| g.scatter_rows(ids.clone(), rows))
            }
            Op::ScatterRows(ids, _) => one(&|| g.gather_rows(ids.clone())),
            Op::SelectCols(idx) => {
                let n = x(0).shape()[1];
                one(&|| g.place_cols(idx.clone(), n))
            }
            Op::PlaceCols(idx, _) => one(&|| g.select_cols(idx.clone())),
            Op::Reshape(_) => one(&|| g.reshape(&x(0).shape())),
            Op::CausalMean { seq_len, transpose } => one(&|| {
                self.push(
                    Op::CausalMean {
                        seq_len,
                        transpose: !transpose,
                    },
                    &[g.id],
                )
            }),
            Op::SegmentSum(len, w) => one(&|| g.segment_expand(len, w.clone())),
            Op::SegmentExpand(len, w) => one(&|| g.segment_sum(len, w.clone())),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the node's value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    fn unary(self, op: Op) -> Result<Var<'t>> {
        self.tape.push(op, &[self.id])
    }

    fn binary(self, op: Op, other: Var<'t>) -> Result<Var<'t>> {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
        self.tape.push(op, &[self.id, other.id])
    }

    fn zeros_like(&self) -> Result<Var<'t>> {
        self.tape.leaf(Tensor::zeros(&self.shape()))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Sub, other)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Div, other)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Op::Neg)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(c))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Op::Log)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Op::Tanh)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false, false, 1)
    }

    /// Batched matrix product with optional transposes; see [`Op::MatMul`].
    pub fn matmul_ex(
        self,
        other: Var<'t>,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
    ) -> Result<Var<'t>> {
        self.binary(
            Op::MatMul {
                trans_a,
                trans_b,
                batch,
            },
            other,
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Op::SumAll)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn broadcast_scalar(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::BroadcastScalar(shape.to_vec()))
    }

    /// `[m, n] -> [n]`
    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.unary(Op::SumRows)
    }

    /// `[n] -> [m, n]`
    pub fn broadcast_rows(self, m: usize) -> Result<Var<'t>> {
        self.unary(Op::BroadcastRows(m))
    }

    /// Sum over the last axis.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        self.unary(Op::SumCols)
    }

    /// Repeat every element `n` times along a new last axis.
    pub fn broadcast_cols(self, n: usize) -> Result<Var<'t>> {
        self.unary(Op::BroadcastCols(n))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(Op::Softmax)
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.unary(Op::LogSoftmax)
    }

    /// Embedding lookup: rows of a `[rows, cols]` table.
    pub fn gather_rows(self, ids: Arc<[usize]>) -> Result<Var<'t>> {
        self.unary(Op::GatherRows(ids))
    }

    pub fn scatter_rows(self, ids: Arc<[usize]>, rows: usize) -> Result<Var<'t>> {
        self.unary(Op::ScatterRows(ids, rows))
    }

    /// `out[i] = x[i, idx[i]]`
    pub fn select_cols(self, idx: Arc<[usize]>) -> Result<Var<'t>> {
        self.unary(Op::SelectCols(idx))
    }

    pub fn place_cols(self, idx: Arc<[usize]>, cols: usize) -> Result<Var<'t>> {
        self.unary(Op::PlaceCols(idx, cols))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let numel: usize = shape.iter().product();
        let have = self.tape.value(self.id).numel();
        if numel != have {
            return Err(AutodiffError::shape("reshape", &self.shape(), shape));
        }
        self.unary(Op::Reshape(shape.to_vec()))
    }

    /// Running mean down each block of `seq_len` rows (causal mixing).
    pub fn causal_mean(self, seq_len: usize) -> Result<Var<'t>> {
        self.unary(Op::CausalMean {
            seq_len,
            transpose: false,
        })
    }

    /// Weighted sum of each block of `seg_len` rows: `out[s] = Σ w_r x[r]`.
    pub fn segment_sum(self, seg_len: usize, weights: Arc<[f64]>) -> Result<Var<'t>> {
        self.unary(Op::SegmentSum(seg_len, weights))
    }

    pub fn segment_expand(self, seg_len: usize, weights: Arc<[f64]>) -> Result<Var<'t>> {
        self.unary(Op::SegmentExpand(seg_len, weights))
    }

    /// `x + bias` with a `[n]` bias broadcast over the rows of `[m, n]`.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let m = self.shape()[0];
        self.add(bias.broadcast_rows(m)?)
    }

    /// Multiply every element by a scalar node.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        self.mul(s.broadcast_scalar(&shape)?)
    }

    /// Dot product of two equally shaped nodes, as a scalar.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other)?.sum()
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`.
///
/// The scale is `min(1, max_norm / ‖g‖)`. When inactive the tensors pass
/// through unchanged (identity Jacobian); when active the scale is built on
/// the tape from the norm itself, so the Jacobian is that of `g · c / ‖g‖`.
pub fn clip_by_global_norm<'t>(
    tape: &'t Tape,
    grads: &[Var<'t>],
    max_norm: f64,
) -> Result<Vec<Var<'t>>> {
    if !(max_norm > 0.0) {
        return Err(AutodiffError::invalid(
            "clip_by_global_norm",
            "max_norm must be positive",
        ));
    }
    let norm_sq: f64 = grads.iter().map(|g| tape.value(g.id).squared_norm()).sum();
    if norm_sq.sqrt() <= max_norm {
        return Ok(grads.to_vec());
    }
    let mut total: Option<Var<'t>> = None;
    for g in grads {
        let sq = g.dot(*g)?;
        total = Some(match total {
            None => sq,
            Some(t) => t.add(sq)?,
        });
    }
    let norm = total
        .expect("non-empty: norm exceeded a positive bound")
        .sqrt()?;
    let scale = tape.scalar(max_norm)?.div(norm)?;
    grads.iter().map(|g| g.mul_scalar(scale)).collect()
}
