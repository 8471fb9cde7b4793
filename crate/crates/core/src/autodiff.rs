//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a linear record of the forward pass. Each recorded node
//! keeps its value and the rule needed to push an output gradient back to
//! its inputs; [`Tape::backward`] walks the record once in reverse, so each
//! use of an input contributes exactly one accumulation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    MulConst(Var, Vec<f64>),
    RowScale(Var, Vec<f64>),
    Scale(Var, f64),
    SumAll(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    PadAxis {
        x: Var,
        outer: usize,
        len: usize,
        pad: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        len: usize,
        keep: usize,
        inner: usize,
    },
    Permute {
        x: Var,
        /// For every output element, the flat index of its source.
        source: Vec<usize>,
    },
    Dropout(Var, Vec<f64>),
    Gelu(Var),
    Mse(Var, Var),
    Dot(Var, Var),
    MaskRows {
        x: Var,
        token: Var,
        rows: Vec<bool>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ScalarJacobian {
        input: Var,
        jacobian: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Forward record for one loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    zero_norm_rows: usize,
}

/// Gradients of the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rows that had zero norm in [`Tape::l2_normalize_rows`].
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.shape(row) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, b)| *o += b);
        }
        Ok(self.record(out, Op::AddRow(x, row), &[x, row]))
    }

    /// Adds an `[r, n]` block to each of the `b` consecutive `[r, n]` blocks of
    /// a `[b * r, n]` matrix.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let (r, n2) = self.value(tile).dims2()?;
        if n != n2 || m % r != 0 {
            return Err(Error::shape("add_tiled", self.shape(x), self.shape(tile)));
        }
        let t = self.value(tile).data();
        let mut out = self.value(x).clone();
        for block in out.data_mut().chunks_mut(r * n) {
            block.iter_mut().zip(t).for_each(|(o, v)| *o += v);
        }
        Ok(self.record(out, Op::AddTiled(x, tile), &[x, tile]))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(c.shape(), data)?;
        Ok(self.record(out, Op::MulConst(x, c.data().to_vec()), &[x]))
    }

    /// `out[i, :] = x[i, :] * scale[i] + shift[i]` with constant `scale` and `shift`.
    pub fn row_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if scale.len() != m || shift.len() != m {
            return Err(Error::shape("row_affine", self.shape(x), &[scale.len()]));
        }
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * scale[i] + shift[i]);
        }
        Ok(self.record(out, Op::RowScale(x, scale.to_vec()), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.record(out, Op::Scale(x, factor), &[x])
    }

    /// `x + c` for a constant scalar; the gradient passes through unchanged.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.record(out, Op::Scale(x, 1.0), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape
    /// (a rank-1 input yields a one-element tensor).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("mean_axis: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.record(out, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(out, Op::Reshape(x), &[x]))
    }

    /// Appends `pad` zeros at the end of `axis`.
    pub fn pad_axis(&mut self, x: Var, axis: usize, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("pad_axis: axis {axis} out of range for {shape:?}")));
        }
        if pad == 0 {
            return Ok(x);
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * (len + pad) * inner];
        for o in 0..outer {
            let s = o * len * inner;
            let d = o * (len + pad) * inner;
            out[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len + pad;
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.record(out, Op::PadAxis { x, outer, len, pad, inner }, &[x]))
    }

    /// Keeps the first `keep` entries along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, keep: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || keep == 0 || keep > shape[axis] {
            return Err(Error::Contract(format!("narrow: cannot keep {keep} along axis {axis} of {shape:?}")));
        }
        if keep == shape[axis] {
            return Ok(x);
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * keep * inner);
        for o in 0..outer {
            let s = o * len * inner;
            out.extend_from_slice(&src[s..s + keep * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = keep;
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.record(out, Op::Narrow { x, outer, len, keep, inner }, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!("permute: {perm:?} is not a permutation of {shape:?}")));
        }
        let mut in_strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let numel = self.value(x).numel();
        let mut source = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            source.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let src = self.value(x).data();
        let data = source.iter().map(|&s| src[s]).collect();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.record(out, Op::Permute { x, source }, &[x]))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.record(out, Op::Dropout(x, mask), &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.record(out, Op::Gelu(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.record(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Sum of elementwise products.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        Ok(self.record(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Replaces the flagged rows of `[m, n]` matrix `x` by the length-`n` `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, rows: &[bool]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if rows.len() != m || self.shape(token) != [n] {
            return Err(Error::shape("mask_rows", self.shape(x), self.shape(token)));
        }
        let mut out = self.value(x).clone();
        let t = self.value(token).data().to_vec();
        for (chunk, _) in out.data_mut().chunks_mut(n).zip(rows).filter(|(_, &r)| r) {
            chunk.copy_from_slice(&t);
        }
        Ok(self.record(
            out,
            Op::MaskRows {
                x,
                token,
                rows: rows.to_vec(),
            },
            &[x, token],
        ))
    }

    /// Scales each row of `x` to unit Euclidean norm. Zero rows stay zero,
    /// pass no gradient, and are counted in [`Tape::zero_norm_rows`].
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                self.zero_norm_rows += 1;
            }
            norms.push(norm);
        }
        Ok(self.record(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Records an externally computed function of a one-element `input`,
    /// given its value and the derivative of every output element with
    /// respect to that input.
    pub fn scalar_map(&mut self, input: Var, value: Tensor, jacobian: Vec<f64>) -> Result<Var> {
        if self.value(input).numel() != 1 || jacobian.len() != value.numel() {
            return Err(Error::shape("scalar_map", self.shape(input), value.shape()));
        }
        Ok(self.record(value, Op::ScalarJacobian { input, jacobian }, &[input]))
    }

    /// Mean softmax cross-entropy of `[b, c]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::Contract(format!(
                "softmax_cross_entropy: {} labels for {b} rows of {c} classes",
                labels.len()
            )));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() + max - row[label];
            probs.extend(row.iter().map(|v| (v - max).exp() / z));
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.record(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Consumes the tape and returns `d loss / d leaf` for every trainable leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let wants = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[a.0].value.dims2()?;
                    let (_, n) = nodes[b.0].value.dims2()?;
                    if wants(a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, nodes[b.0].value.data(), true, &mut da, 0.0);
                        accumulate(&mut grads, *a, da);
                    }
                    if wants(b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, nodes[a.0].value.data(), true, &g, false, &mut db, 0.0);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if wants(b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if wants(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    if wants(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        let d = g.iter().zip(nodes[b.0].value.data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, *a, d);
                    }
                    if wants(b) {
                        let d = g.iter().zip(nodes[a.0].value.data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::AddRow(x, row) => {
                    if wants(row) {
                        let n = nodes[row.0].value.numel();
                        let mut d = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            d.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *row, d);
                    }
                    if wants(x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::AddTiled(x, tile) => {
                    if wants(tile) {
                        let n = nodes[tile.0].value.numel();
                        let mut d = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            d.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *tile, d);
                    }
                    if wants(x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::MulConst(x, c) => {
                    let d = g.iter().zip(c).map(|(g, c)| g * c).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::RowScale(x, scale) => {
                    let n = g.len() / scale.len();
                    let d = g.iter().enumerate().map(|(i, g)| g * scale[i / n]).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * f).collect());
                }
                Op::SumAll(x) => {
                    let n = nodes[x.0].value.numel();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::MeanAxis { x, outer, len, inner } => {
                    let inv = 1.0 / *len as f64;
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for i in 0..*inner {
                                d[base + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::PadAxis { x, outer, len, pad, inner } => {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let s = o * (len + pad) * inner;
                        d.extend_from_slice(&g[s..s + len * inner]);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Narrow { x, outer, len, keep, inner } => {
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..*outer {
                        let s = o * keep * inner;
                        let t = o * len * inner;
                        d[t..t + keep * inner].copy_from_slice(&g[s..s + keep * inner]);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Permute { x, source } => {
                    let mut d = vec![0.0; source.len()];
                    for (gv, &s) in g.iter().zip(source) {
                        d[s] += gv;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Dropout(x, mask) => {
                    let d = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let d = g
                        .iter()
                        .zip(nodes[x.0].value.data())
                        .map(|(g, &v)| {
                            let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                        })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Mse(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let f = 2.0 * g[0] / av.len() as f64;
                    let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| f * (x - y)).collect();
                    if wants(b) {
                        accumulate(&mut grads, *b, diff.iter().map(|v| -v).collect());
                    }
                    if wants(a) {
                        accumulate(&mut grads, *a, diff);
                    }
                }
                Op::Dot(a, b) => {
                    if wants(a) {
                        let d = nodes[b.0].value.data().iter().map(|v| v * g[0]).collect();
                        accumulate(&mut grads, *a, d);
                    }
                    if wants(b) {
                        let d = nodes[a.0].value.data().iter().map(|v| v * g[0]).collect();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::MaskRows { x, token, rows } => {
                    let n = nodes[token.0].value.numel();
                    if wants(token) {
                        let mut d = vec![0.0; n];
                        for (chunk, _) in g.chunks(n).zip(rows).filter(|(_, &r)| r) {
                            d.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *token, d);
                    }
                    if wants(x) {
                        let mut d = g;
                        for (chunk, _) in d.chunks_mut(n).zip(rows).filter(|(_, &r)| r) {
                            chunk.fill(0.0);
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    let n = g.len() / norms.len();
                    let y = node.value.data();
                    let mut d = vec![0.0; g.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let span = r * n..(r + 1) * n;
                        let gy: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            d[j] = (g[j] - y[j] * gy) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::ScalarJacobian { input, jacobian } => {
                    let s = g.iter().zip(jacobian).map(|(g, j)| g * j).sum();
                    accumulate(&mut grads, *input, vec![s]);
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let c = probs.len() / labels.len();
                    let f = g[0] / labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * f).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l] -= f;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}
