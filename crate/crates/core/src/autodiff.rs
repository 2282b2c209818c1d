//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Operations append nodes in evaluation order, so the node list is already
//! topologically sorted and [`Tape::backward`] walks it once in reverse.

use crate::error::{Error, Result};
use crate::tensor::{
    check_finite, matmul_dims, matmul_nn, matmul_nt, matmul_tn, softmax_rows, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
        cols: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. Holds values, the op that produced each, and
/// after [`Tape::backward`], gradients on every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let mut cols = vec![0.0; g.patch_len() * hw];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        cols[row * hw + oi * wo + oj] =
                            x[(c * g.height + ii as usize) * g.width + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let mut x = vec![0.0; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        x[(c * g.height + ii as usize) * g.width + jj as usize] +=
                            cols[row * hw + oi * wo + oj];
                    }
                }
            }
        }
    }
    x
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after the first `len`. Vars created after
    /// that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. It participates in differentiation iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[1]))
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, value.data())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(ta.shape(), tb.shape())?;
        let out = Tensor::raw(vec![m, n], matmul_nn(ta.data(), tb.data(), m, k, n));
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let out = Tensor::raw(vec![m, n], matmul_nt(ta.data(), tb.data(), m, k, n));
        self.push("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::raw(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector along the trailing dimension.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let w = tx.last_dim();
        if tb.len() != w {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(w) {
            row.iter_mut().zip(tb.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::raw(tx.shape().to_vec(), data);
        self.push("add_row", out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::raw(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::raw(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v * sigmoid(v));
        self.push("silu", out, Op::Silu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::raw(vec![1], vec![s]), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::raw(vec![1], vec![s]), Op::Mean(x), &[x])
    }

    /// Mean over all leading rows: `[.., n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, w) = (t.rows(), t.last_dim());
        let mut out = vec![0.0; w];
        for row in t.data().chunks(w) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push("mean_rows", Tensor::raw(vec![1, w], out), Op::MeanRows(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::raw(t.shape().to_vec(), softmax_rows(t.data(), t.last_dim()));
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Softmax over the last dimension restricted to entries where `allowed`
    /// is true; disallowed entries are exactly zero. Every row needs at
    /// least one allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if allowed.len() != t.len() {
            return Err(Error::InvalidShape(format!(
                "mask of {} entries for tensor {:?}",
                allowed.len(),
                t.shape()
            )));
        }
        let w = t.last_dim();
        let mut out = vec![0.0; t.len()];
        for ((row, m), o) in t.data().chunks(w).zip(allowed.chunks(w)).zip(out.chunks_mut(w)) {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidShape("attention row with no allowed entry".into()));
            }
            let mut s = 0.0;
            for ((ov, &v), &a) in o.iter_mut().zip(row).zip(m) {
                if a {
                    *ov = (v - max).exp();
                    s += *ov;
                }
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::raw(t.shape().to_vec(), out);
        self.push("masked_softmax", out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let w = tx.last_dim();
        if tg.len() != w || tb.len() != w {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(w).enumerate() {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..w {
                let h = (row[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::raw(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite { op: "row_normalize" });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::raw(t.shape().to_vec(), out);
        self.push("row_normalize", out, Op::RowNormalize { x, norms }, &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        if t.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= v) {
            return Err(Error::TargetOutOfRange { index: bad, vocab: v });
        }
        let mut loss = 0.0;
        let mut probs = vec![0.0; t.len()];
        for (r, row) in t.data().chunks(v).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::raw(vec![1], vec![loss / targets.len() as f64]);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `out.flat[i] = x.flat[indices[i]]`, reshaped to `shape`. Covers row
    /// lookup, column slicing and arbitrary permutations.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::InvalidShape(format!(
                "gather of {} indices into {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::InvalidShape(format!("gather index {bad} >= {}", t.len())));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::raw(shape, data);
        self.push("gather", out, Op::Gather(x, indices), &[x])
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let w = self.value(x).last_dim();
        let idx = rows.iter().flat_map(|&r| (r * w)..(r * w + w)).collect();
        self.gather(x, idx, vec![rows.len(), w])
    }

    /// Selects columns `start..start+width` of a 2-D tensor.
    pub fn columns(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, w) = (t.rows(), t.last_dim());
        if start + width > w {
            return Err(Error::InvalidShape(format!("columns {start}+{width} of {w}")));
        }
        let idx = (0..r).flat_map(|i| (i * w + start)..(i * w + start + width)).collect();
        self.gather(x, idx, vec![r, width])
    }

    /// Concatenates 2-D tensors with equal row counts along the last dim.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::raw(vec![rows, total], data);
        self.push("concat_last", out, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// 2-D convolution of a single `[C,H,W]` image with weights
    /// `[out, C·k·k]` and bias `[out]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.len() != geom.in_channels * geom.height * geom.width
            || tw.len() != geom.out_channels * geom.patch_len()
            || tb.len() != geom.out_channels
        {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (ho, wo) = geom.out_hw();
        let hw = ho * wo;
        let cols = im2col(tx.data(), &geom);
        let mut out = matmul_nn(tw.data(), &cols, geom.out_channels, geom.patch_len(), hw);
        for (o, row) in out.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v += tb.data()[o]);
        }
        let out = Tensor::raw(vec![geom.out_channels, ho, wo], out);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// Reverse pass from a scalar `loss`. Populates `grad` on every leaf that
    /// requires it; the tape cannot be differentiated again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if needs(a) {
                        accumulate(&mut grads[a.0], &matmul_nt(&g, tb.data(), m, n, k));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], &matmul_tn(ta.data(), &g, m, k, n));
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    if needs(a) {
                        accumulate(&mut grads[a.0], &matmul_nn(&g, tb.data(), m, n, k));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], &matmul_tn(&g, ta.data(), m, n, k));
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if needs(b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads[b.0], &neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    if needs(a) {
                        let ga: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[a.0], &ga);
                    }
                    if needs(b) {
                        let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[b.0], &gb);
                    }
                }
                Op::AddRow(x, bias) => {
                    if needs(x) {
                        accumulate(&mut grads[x.0], &g);
                    }
                    if needs(bias) {
                        let w = val(bias).len();
                        let mut gb = vec![0.0; w];
                        for row in g.chunks(w) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads[bias.0], &gb);
                    }
                }
                Op::Scale(x, c) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Gelu(x) => {
                    let xs = val(x).data();
                    let gx: Vec<f64> = g.iter().zip(xs).map(|(g, &x)| g * gelu_grad(x)).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Silu(x) => {
                    let xs = val(x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xs)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; val(x).len()];
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Mean(x) => {
                    let n = val(x).len();
                    let gx = vec![g[0] / n as f64; n];
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::MeanRows(x) => {
                    let t = val(x);
                    let r = t.rows() as f64;
                    let gx: Vec<f64> = (0..t.len()).map(|i| g[i % g.len()] / r).collect();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Softmax(x) => {
                    // Masked entries have y = 0, so the same Jacobian applies.
                    let y = node.value.data();
                    let w = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                        let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            out[j] = yr[j] * (gr[j] - d);
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let w = val(gain).len();
                    let gd = val(gain).data();
                    if needs(gain) {
                        let mut gg = vec![0.0; w];
                        for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                            for j in 0..w {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                        accumulate(&mut grads[gain.0], &gg);
                    }
                    if needs(bias) {
                        let mut gb = vec![0.0; w];
                        for gr in g.chunks(w) {
                            gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads[bias.0], &gb);
                    }
                    if needs(x) {
                        let mut gx = vec![0.0; g.len()];
                        for (r, (gr, hr)) in g.chunks(w).zip(xhat.chunks(w)).enumerate() {
                            let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / w as f64;
                            let mean_dh_h =
                                dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                            for j in 0..w {
                                gx[r * w + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads[x.0], &gx);
                    }
                }
                Op::RowNormalize { x, norms } => {
                    let y = node.value.data();
                    let w = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.chunks(w).zip(g.chunks(w)).enumerate() {
                        let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            gx[r * w + j] = (gr[j] - yr[j] * d) / norms[r];
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = val(logits).last_dim();
                    let scale = g[0] / targets.len() as f64;
                    let mut gx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gx[r * v + t] -= 1.0;
                    }
                    gx.iter_mut().for_each(|x| *x *= scale);
                    accumulate(&mut grads[logits.0], &gx);
                }
                Op::Gather(x, idx) => {
                    let mut gx = vec![0.0; val(x).len()];
                    for (gv, &j) in g.iter().zip(idx) {
                        gx[j] += gv;
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::ConcatLast(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.last_dim();
                    let mut off = 0;
                    for p in parts {
                        let w = val(p).last_dim();
                        if needs(p) {
                            let mut gp = vec![0.0; rows * w];
                            for r in 0..rows {
                                gp[r * w..(r + 1) * w]
                                    .copy_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            accumulate(&mut grads[p.0], &gp);
                        }
                        off += w;
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let (ho, wo) = geom.out_hw();
                    let hw = ho * wo;
                    let pl = geom.patch_len();
                    let oc = geom.out_channels;
                    if needs(b) {
                        let gb: Vec<f64> = g.chunks(hw).map(|r| r.iter().sum()).collect();
                        accumulate(&mut grads[b.0], &gb);
                    }
                    if needs(w) {
                        accumulate(&mut grads[w.0], &matmul_nt(&g, cols, oc, hw, pl));
                    }
                    if needs(x) {
                        let gcols = matmul_tn(val(w).data(), &g, oc, pl, hw);
                        accumulate(&mut grads[x.0], &col2im(&gcols, geom));
                    }
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                if let Some(g) = g {
                    node.value.accumulate_grad(&g);
                } else if node.value.grad.is_none() {
                    node.value.grad = Some(vec![0.0; node.value.len()]);
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient check.
///
/// `f` builds a scalar on a fresh tape from the leaf holding `x`. Returns
/// per-element relative error between the analytic gradient and
/// `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`, using `max(|analytic|, |numeric|, 1e-8)`
/// as the denominator.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("leaf gradient populated").to_vec();
    let numeric = numeric_gradient(&f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .collect())
}

pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        out.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(out)
}
