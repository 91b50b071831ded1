//! Primitive operations and their forward kernels.
//!
//! Every primitive's vector-Jacobian product is written in terms of other
//! primitives (see `Tape::vjp`), which is what lets a recorded backward pass
//! be differentiated again.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Tanh,
    Sqrt,
    /// Block-diagonal product: both operands are split into `batch` row
    /// blocks and block `i` of the output is `op(A_i) op(B_i)`.
    MatMul {
        trans_a: bool,
        trans_b: bool,
        batch: usize,
    },
    SumAll,
    BroadcastScalar(Vec<usize>),
    SumRows,
    BroadcastRows(usize),
    SumCols,
    BroadcastCols(usize),
    Softmax,
    LogSoftmax,
    GatherRows(Arc<[usize]>),
    ScatterRows(Arc<[usize]>, usize),
    SelectCols(Arc<[usize]>),
    PlaceCols(Arc<[usize]>, usize),
    Reshape(Vec<usize>),
    /// Running mean over each block of `seq_len` rows; `transpose` selects
    /// the adjoint (weighted suffix sum).
    CausalMean {
        seq_len: usize,
        transpose: bool,
    },
    SegmentSum(usize, Arc<[f64]>),
    SegmentExpand(usize, Arc<[f64]>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sqrt => "sqrt",
            Op::MatMul { .. } => "matmul",
            Op::SumAll => "sum",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::GatherRows(_) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::SelectCols(_) => "select_cols",
            Op::PlaceCols(..) => "place_cols",
            Op::Reshape(_) => "reshape",
            Op::CausalMean { .. } => "causal_mean",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentExpand(..) => "segment_expand",
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    a.zip_map(b, f)
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(AutodiffError::invalid(
            op,
            format!("expected a matrix, got shape {other:?}"),
        )),
    }
}

/// Split a shape into (rows, cols) for ops that act on the last axis.
/// Rank-0 tensors are rejected.
fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() == 0 {
        return Err(AutodiffError::invalid(op, "needs at least one axis"));
    }
    Ok(t.rows_cols())
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves have no forward"),
        Op::Add => binary("add", inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => binary("sub", inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => binary("mul", inputs[0], inputs[1], |a, b| a * b),
        Op::Div => binary("div", inputs[0], inputs[1], |a, b| a / b),
        Op::Neg => Ok(inputs[0].map(|a| -a)),
        Op::Scale(c) => Ok(inputs[0].map(|a| a * c)),
        Op::AddScalar(c) => Ok(inputs[0].map(|a| a + c)),
        Op::Exp => Ok(inputs[0].map(f64::exp)),
        Op::Log => Ok(inputs[0].map(f64::ln)),
        Op::Tanh => Ok(inputs[0].map(f64::tanh)),
        Op::Sqrt => Ok(inputs[0].map(f64::sqrt)),
        Op::MatMul {
            trans_a,
            trans_b,
            batch,
        } => matmul(inputs[0], inputs[1], *trans_a, *trans_b, *batch),
        Op::SumAll => Ok(Tensor::scalar(inputs[0].sum())),
        Op::BroadcastScalar(shape) => {
            if inputs[0].numel() != 1 {
                return Err(AutodiffError::invalid(
                    "broadcast_scalar",
                    "input is not a scalar",
                ));
            }
            Ok(Tensor::full(shape, inputs[0].item()))
        }
        Op::SumRows => {
            let (m, n) = rank2("sum_rows", inputs[0])?;
            let d = inputs[0].data();
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, v) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                    *o += v;
                }
            }
            Ok(Tensor::vector(out))
        }
        Op::BroadcastRows(m) => {
            let x = inputs[0];
            if x.rank() != 1 {
                return Err(AutodiffError::invalid(
                    "broadcast_rows",
                    "expected a vector",
                ));
            }
            let n = x.numel();
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..*m {
                out.extend_from_slice(x.data());
            }
            Tensor::new(vec![*m, n], out)
        }
        Op::SumCols => {
            let x = inputs[0];
            let (m, n) = last_axis("sum_cols", x)?;
            let out: Vec<f64> = x.data().chunks(n).map(|r| r.iter().sum()).collect();
            debug_assert_eq!(out.len(), m);
            Tensor::new(x.shape()[..x.rank() - 1].to_vec(), out)
        }
        Op::BroadcastCols(n) => {
            let x = inputs[0];
            let mut out = Vec::with_capacity(x.numel() * n);
            for &v in x.data() {
                out.extend(std::iter::repeat_n(v, *n));
            }
            let mut shape = x.shape().to_vec();
            shape.push(*n);
            Tensor::new(shape, out)
        }
        Op::Softmax => {
            let x = inputs[0];
            let (_, n) = last_axis("softmax", x)?;
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut total = 0.0;
                for &v in row {
                    let e = (v - max).exp();
                    total += e;
                    out.push(e);
                }
                for o in &mut out[start..] {
                    *o /= total;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::LogSoftmax => {
            let x = inputs[0];
            let (_, n) = last_axis("log_softmax", x)?;
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + total.ln();
                out.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::GatherRows(ids) => {
            let table = inputs[0];
            let (rows, cols) = rank2("gather_rows", table)?;
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &id in ids.iter() {
                if id >= rows {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather_rows",
                        index: id,
                        size: rows,
                    });
                }
                out.extend_from_slice(&table.data()[id * cols..(id + 1) * cols]);
            }
            Tensor::new(vec![ids.len(), cols], out)
        }
        Op::ScatterRows(ids, rows) => {
            let g = inputs[0];
            let (n, cols) = rank2("scatter_rows", g)?;
            if n != ids.len() {
                return Err(AutodiffError::shape(
                    "scatter_rows",
                    g.shape(),
                    &[ids.len(), cols],
                ));
            }
            let mut out = vec![0.0; rows * cols];
            for (i, &id) in ids.iter().enumerate() {
                if id >= *rows {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "scatter_rows",
                        index: id,
                        size: *rows,
                    });
                }
                let src = &g.data()[i * cols..(i + 1) * cols];
                for (o, v) in out[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                    *o += v;
                }
            }
            Tensor::new(vec![*rows, cols], out)
        }
        Op::SelectCols(idx) => {
            let x = inputs[0];
            let (m, n) = rank2("select_cols", x)?;
            if idx.len() != m {
                return Err(AutodiffError::shape("select_cols", x.shape(), &[idx.len()]));
            }
            let mut out = Vec::with_capacity(m);
            for (i, &j) in idx.iter().enumerate() {
                if j >= n {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "select_cols",
                        index: j,
                        size: n,
                    });
                }
                out.push(x.data()[i * n + j]);
            }
            Ok(Tensor::vector(out))
        }
        Op::PlaceCols(idx, n) => {
            let g = inputs[0];
            if g.rank() != 1 || g.numel() != idx.len() {
                return Err(AutodiffError::shape("place_cols", g.shape(), &[idx.len()]));
            }
            let m = idx.len();
            let mut out = vec![0.0; m * n];
            for (i, &j) in idx.iter().enumerate() {
                if j >= *n {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "place_cols",
                        index: j,
                        size: *n,
                    });
                }
                out[i * n + j] = g.data()[i];
            }
            Tensor::new(vec![m, *n], out)
        }
        Op::Reshape(shape) => inputs[0].clone().reshape(shape.clone()),
        Op::CausalMean { seq_len, transpose } => causal_mean(inputs[0], *seq_len, *transpose),
        Op::SegmentSum(seg_len, weights) => segment_sum(inputs[0], *seg_len, weights),
        Op::SegmentExpand(seg_len, weights) => segment_expand(inputs[0], *seg_len, weights),
    }
}

fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool, batch: usize) -> Result<Tensor> {
    let (ar, ac) = rank2("matmul", a)?;
    let (br, bc) = rank2("matmul", b)?;
    if batch == 0 || ar % batch != 0 || br % batch != 0 {
        return Err(AutodiffError::invalid(
            "matmul",
            format!("row counts {ar} and {br} are not divisible by batch {batch}"),
        ));
    }
    let (a_rows, b_rows) = (ar / batch, br / batch);
    let (m, k) = if trans_a { (ac, a_rows) } else { (a_rows, ac) };
    let (k2, n) = if trans_b { (bc, b_rows) } else { (b_rows, bc) };
    if k != k2 {
        return Err(AutodiffError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; batch * m * n];
    if k == 0 || m == 0 || n == 0 {
        return Tensor::new(vec![batch * m, n], out);
    }
    let (rsa, csa) = if trans_a { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if trans_b { (1, bc) } else { (bc, 1) };
    let a_block = a_rows * ac;
    let b_block = b_rows * bc;
    for bi in 0..batch {
        let a_blk = &a.data()[bi * a_block..(bi + 1) * a_block];
        let b_blk = &b.data()[bi * b_block..(bi + 1) * b_block];
        let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
        // SAFETY: the slices above hold exactly the strided m×k, k×n and
        // m×n views described by the dimension and stride arguments.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a_blk.as_ptr(),
                rsa as isize,
                csa as isize,
                b_blk.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(vec![batch * m, n], out)
}

fn causal_mean(x: &Tensor, seq_len: usize, transpose: bool) -> Result<Tensor> {
    let (rows, cols) = rank2("causal_mean", x)?;
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(AutodiffError::invalid(
            "causal_mean",
            format!("{rows} rows do not split into sequences of {seq_len}"),
        ));
    }
    let d = x.data();
    let mut out = vec![0.0; rows * cols];
    let mut acc = vec![0.0; cols];
    for block in 0..rows / seq_len {
        let base = block * seq_len;
        acc.iter_mut().for_each(|a| *a = 0.0);
        if transpose {
            for i in (0..seq_len).rev() {
                let inv = 1.0 / (i + 1) as f64;
                let r = (base + i) * cols;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += d[r + c] * inv;
                    out[r + c] = *a;
                }
            }
        } else {
            for i in 0..seq_len {
                let inv = 1.0 / (i + 1) as f64;
                let r = (base + i) * cols;
                for c in 0..cols {
                    acc[c] += d[r + c];
                    out[r + c] = acc[c] * inv;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn segment_sum(x: &Tensor, seg_len: usize, weights: &[f64]) -> Result<Tensor> {
    if x.rank() == 0 || x.rank() > 2 {
        return Err(AutodiffError::invalid(
            "segment_sum",
            "expected a vector or matrix",
        ));
    }
    let (rows, cols) = x.rows_cols();
    let (rows, cols) = if x.rank() == 1 {
        (cols, 1)
    } else {
        (rows, cols)
    };
    if seg_len == 0 || rows % seg_len != 0 || weights.len() != rows {
        return Err(AutodiffError::invalid(
            "segment_sum",
            format!(
                "{rows} rows, segment length {seg_len}, {} weights",
                weights.len()
            ),
        ));
    }
    let segs = rows / seg_len;
    let d = x.data();
    let mut out = vec![0.0; segs * cols];
    for r in 0..rows {
        let w = weights[r];
        if w == 0.0 {
            continue;
        }
        let s = r / seg_len;
        for c in 0..cols {
            out[s * cols + c] += w * d[r * cols + c];
        }
    }
    let shape = if x.rank() == 1 {
        vec![segs]
    } else {
        vec![segs, cols]
    };
    Tensor::new(shape, out)
}

fn segment_expand(g: &Tensor, seg_len: usize, weights: &[f64]) -> Result<Tensor> {
    if g.rank() == 0 || g.rank() > 2 {
        return Err(AutodiffError::invalid(
            "segment_expand",
            "expected a vector or matrix",
        ));
    }
    let (segs, cols) = if g.rank() == 1 {
        (g.numel(), 1)
    } else {
        g.rows_cols()
    };
    let rows = segs * seg_len;
    if weights.len() != rows {
        return Err(AutodiffError::invalid(
            "segment_expand",
            format!("{rows} rows but {} weights", weights.len()),
        ));
    }
    let d = g.data();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let w = weights[r];
        let s = r / seg_len;
        for c in 0..cols {
            out[r * cols + c] = w * d[s * cols + c];
        }
    }
    let shape = if g.rank() == 1 {
        vec![rows]
    } else {
        vec![rows, cols]
    };
    Tensor::new(shape, out)
}
