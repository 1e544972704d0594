//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] owns every intermediate value; forward builder methods record
//! an [`Op`] per node and [`Tape::backward`] replays the list in reverse.
//! Adjoints are accumulated in node order with a fixed elementwise loop, so
//! repeated backward passes over the same tape are bit-identical.

use super::ops;
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Gelu { a: Var },
    MaskedSoftmax { a: Var, mask: Vec<bool>, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    SpatialMean { x: Var },
    MeanAxis { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { x: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SumAll { x: Var },
    BceWithLogits { z: Var, y: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    adj: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn check(&self, op: &'static str, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::ForeignVar { op })
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let v = ops::matmul_nn(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul { a, b }, ng))
    }

    /// a * b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check("matmul_nt", a)?;
        self.check("matmul_nt", b)?;
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatmulNt { a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check("add", a)?;
        self.check("add", b)?;
        let v = ops::add_same(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.check("add_row", a)?;
        self.check("add_row", row)?;
        let v = ops::add_row(self.value(a), self.value(row))?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::AddRow { a, row }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check("mul", a)?;
        self.check("mul", b)?;
        let v = ops::mul_same(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        self.check("scale", a)?;
        let v = ops::scale(self.value(a), c);
        let ng = self.needs(a);
        Ok(self.push(v, Op::Scale { a, c }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("relu", a)?;
        let v = ops::relu(self.value(a));
        let ng = self.needs(a);
        Ok(self.push(v, Op::Relu { a }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("gelu", a)?;
        let v = ops::gelu(self.value(a));
        let ng = self.needs(a);
        Ok(self.push(v, Op::Gelu { a }, ng))
    }

    pub fn masked_softmax(&mut self, a: Var, mask: &[bool], axis: usize) -> Result<Var, TensorError> {
        self.check("masked_softmax", a)?;
        let v = ops::masked_softmax(self.value(a), mask, axis)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::MaskedSoftmax { a, mask: mask.to_vec(), axis }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        self.check("layer_norm", x)?;
        self.check("layer_norm", gamma)?;
        self.check("layer_norm", beta)?;
        let v = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    /// Batched convolution on `[N, C, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        self.check("conv2d", x)?;
        self.check("conv2d", w)?;
        self.check("conv2d", b)?;
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride }, ng))
    }

    /// Convolution of a single `[C, H, W]` image; result is `[CO, OH, OW]`.
    pub fn conv2d_single(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        self.check("conv2d", x)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape,
                reason: "expected rank 3 image".into(),
            });
        }
        let x4 = self.reshape(x, &[1, shape[0], shape[1], shape[2]])?;
        let y4 = self.conv2d(x4, w, b, stride)?;
        let ys = self.value(y4).shape().to_vec();
        self.reshape(y4, &[ys[1], ys[2], ys[3]])
    }

    pub fn spatial_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check("spatial_mean", x)?;
        let v = ops::spatial_mean(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::SpatialMean { x }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check("mean_pool", x)?;
        let v = ops::mean_axis(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::MeanAxis { x, axis }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        for &p in parts {
            self.check("concat", p)?;
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&tensors, axis)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check("reshape", x)?;
        let v = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Reshape { x }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check("slice_rows", x)?;
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape: t.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        if start + len > r || len == 0 {
            return Err(TensorError::IndexOutOfBounds { op: "slice_rows", index: start + len, size: r });
        }
        let v = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check("slice_cols", x)?;
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: t.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        if start + len > c || len == 0 {
            return Err(TensorError::IndexOutOfBounds { op: "slice_cols", index: start + len, size: c });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new(&[r, len], data)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::SliceCols { x, start }, ng))
    }

    /// Select rows by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        self.check("gather_rows", x)?;
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfBounds { op: "gather_rows", index: i, size: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(&[idx.len(), c], data)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check("sum", x)?;
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, ng))
    }

    pub fn bce_with_logits(&mut self, z: Var, y: T) -> Result<Var, TensorError> {
        self.check("bce_with_logits", z)?;
        let t = self.value(z);
        if t.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "bce_with_logits",
                shape: t.shape().to_vec(),
                reason: "expected scalar logit".into(),
            });
        }
        let v = ops::bce_with_logits(t.item(), y);
        let ng = self.needs(z);
        Ok(self.push(Tensor::scalar(v), Op::BceWithLogits { z, y }, ng))
    }

    /// Reverse pass from a scalar root. The tape is immutable; calling this
    /// twice yields bit-identical gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let node = self.nodes.get(root.0).ok_or(TensorError::ForeignVar { op: "backward" })?;
        if node.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: node.value.shape().to_vec() });
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(node.value.shape(), T::one()));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                adj[id] = None;
                continue;
            }
            let Some(d) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    adj[id] = Some(d);
                }
                Op::Matmul { a, b } => {
                    if self.needs(*a) {
                        let da = ops::matmul_nt(&d, &self.nodes[b.0].value)?;
                        accumulate(&mut adj, *a, da);
                    }
                    if self.needs(*b) {
                        let db = ops::matmul_tn(&self.nodes[a.0].value, &d)?;
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::MatmulNt { a, b } => {
                    if self.needs(*a) {
                        let da = ops::matmul_nn(&d, &self.nodes[b.0].value)?;
                        accumulate(&mut adj, *a, da);
                    }
                    if self.needs(*b) {
                        let db = ops::matmul_tn(&d, &self.nodes[a.0].value)?;
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, d.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, d);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.needs(*row) {
                        let n = d.shape()[1];
                        let mut sums = vec![T::zero(); n];
                        for r in d.data().chunks(n) {
                            for (s, &v) in sums.iter_mut().zip(r) {
                                *s += v;
                            }
                        }
                        let shape = self.nodes[row.0].value.shape().to_vec();
                        accumulate(&mut adj, *row, Tensor::new(&shape, sums)?);
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, d);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, ops::mul_same(&d, &self.nodes[b.0].value)?);
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, ops::mul_same(&d, &self.nodes[a.0].value)?);
                    }
                }
                Op::Scale { a, c } => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, ops::scale(&d, *c));
                    }
                }
                Op::Relu { a } => {
                    if self.needs(*a) {
                        let mut da = d;
                        for (g, &x) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                            if x <= T::zero() {
                                *g = T::zero();
                            }
                        }
                        accumulate(&mut adj, *a, da);
                    }
                }
                Op::Gelu { a } => {
                    if self.needs(*a) {
                        let mut da = d;
                        for (g, &x) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                            *g = *g * ops::gelu_deriv(x);
                        }
                        accumulate(&mut adj, *a, da);
                    }
                }
                Op::MaskedSoftmax { a, mask, axis } => {
                    if self.needs(*a) {
                        let y = &self.nodes[id].value;
                        let da = softmax_vjp(y, &d, mask, *axis);
                        accumulate(&mut adj, *a, da);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dg, db) = layer_norm_vjp(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        *eps,
                        &d,
                        self.needs(*x),
                    );
                    if self.needs(*x) {
                        accumulate(&mut adj, *x, dx.expect("requested dx"));
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut adj, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        let shape = self.nodes[beta.0].value.shape().to_vec();
                        accumulate(&mut adj, *beta, db.reshaped(&shape)?);
                    }
                }
                Op::Conv2d { x, w, b, stride } => {
                    let (dx, dw, dbias) = ops::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        *stride,
                        &d,
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut adj, *x, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut adj, *w, dw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, dbias);
                    }
                }
                Op::SpatialMean { x } => {
                    if self.needs(*x) {
                        let xs = self.nodes[x.0].value.shape();
                        let (h, w) = (xs[2], xs[3]);
                        let inv = T::one() / T::cast((h * w) as f64);
                        let mut dx = Tensor::zeros(xs);
                        for (chunk, &g) in dx.data_mut().chunks_mut(h * w).zip(d.data()) {
                            let v = g * inv;
                            for o in chunk {
                                *o = v;
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::MeanAxis { x, axis } => {
                    if self.needs(*x) {
                        let xs = self.nodes[x.0].value.shape().to_vec();
                        let (m, n) = (xs[0], xs[1]);
                        let mut dx = Tensor::zeros(&xs);
                        match axis {
                            0 => {
                                let inv = T::one() / T::cast(m as f64);
                                for row in dx.data_mut().chunks_mut(n) {
                                    for (o, &g) in row.iter_mut().zip(d.data()) {
                                        *o = g * inv;
                                    }
                                }
                            }
                            _ => {
                                let inv = T::one() / T::cast(n as f64);
                                for (row, &g) in dx.data_mut().chunks_mut(n).zip(d.data()) {
                                    let v = g * inv;
                                    for o in row {
                                        *o = v;
                                    }
                                }
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Concat { parts, axis } => match axis {
                    0 => {
                        let mut row0 = 0;
                        for &p in parts {
                            let pr = self.nodes[p.0].value.shape()[0];
                            if self.needs(p) {
                                let c = d.shape()[1];
                                let slice =
                                    Tensor::new(&[pr, c], d.data()[row0 * c..(row0 + pr) * c].to_vec())?;
                                accumulate(&mut adj, p, slice);
                            }
                            row0 += pr;
                        }
                    }
                    _ => {
                        let cols = d.shape()[1];
                        let rows = d.shape()[0];
                        let mut col0 = 0;
                        for &p in parts {
                            let pc = self.nodes[p.0].value.shape()[1];
                            if self.needs(p) {
                                let mut data = Vec::with_capacity(rows * pc);
                                for r in 0..rows {
                                    let base = r * cols + col0;
                                    data.extend_from_slice(&d.data()[base..base + pc]);
                                }
                                accumulate(&mut adj, p, Tensor::new(&[rows, pc], data)?);
                            }
                            col0 += pc;
                        }
                    }
                },
                Op::Reshape { x } => {
                    if self.needs(*x) {
                        let shape = self.nodes[x.0].value.shape().to_vec();
                        accumulate(&mut adj, *x, d.reshaped(&shape)?);
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.needs(*x) {
                        let xs = self.nodes[x.0].value.shape().to_vec();
                        let c = xs[1];
                        let mut dx = Tensor::zeros(&xs);
                        let len = d.shape()[0];
                        dx.data_mut()[start * c..(start + len) * c].copy_from_slice(d.data());
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.needs(*x) {
                        let xs = self.nodes[x.0].value.shape().to_vec();
                        let (r, c) = (xs[0], xs[1]);
                        let len = d.shape()[1];
                        let mut dx = Tensor::zeros(&xs);
                        let dv = dx.data_mut();
                        for i in 0..r {
                            dv[i * c + start..i * c + start + len]
                                .copy_from_slice(&d.data()[i * len..(i + 1) * len]);
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::GatherRows { x, idx } => {
                    if self.needs(*x) {
                        let xs = self.nodes[x.0].value.shape().to_vec();
                        let c = xs[1];
                        let mut dx = Tensor::zeros(&xs);
                        let dv = dx.data_mut();
                        for (r, &i) in idx.iter().enumerate() {
                            let src = &d.data()[r * c..(r + 1) * c];
                            for (o, &g) in dv[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *o += g;
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::SumAll { x } => {
                    if self.needs(*x) {
                        let g = d.item();
                        let dx = Tensor::full(self.nodes[x.0].value.shape(), g);
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::BceWithLogits { z, y } => {
                    if self.needs(*z) {
                        let zv = self.nodes[z.0].value.item();
                        let g = d.item() * (ops::sigmoid(zv) - *y);
                        let dz = Tensor::full(self.nodes[z.0].value.shape(), g);
                        accumulate(&mut adj, *z, dz);
                    }
                }
            }
        }
        Ok(Gradients { adj })
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, &g) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += g;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn softmax_vjp<T: Scalar>(y: &Tensor<T>, d: &Tensor<T>, mask: &[bool], axis: usize) -> Tensor<T> {
    let dim = y.shape()[axis];
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer: usize = y.shape()[..axis].iter().product();
    let mut dx = Tensor::zeros(y.shape());
    let yv = y.data();
    let dv = d.data();
    let xv = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut dot = T::zero();
            for t in 0..dim {
                let p = base + t * inner;
                if mask[p] {
                    dot += dv[p] * yv[p];
                }
            }
            for t in 0..dim {
                let p = base + t * inner;
                if mask[p] {
                    xv[p] = yv[p] * (dv[p] - dot);
                }
            }
        }
    }
    dx
}

fn layer_norm_vjp<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    d: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let n = x.shape()[0];
    let dcols = x.shape()[1];
    let nd = T::cast(dcols as f64);
    let g = gamma.data();
    let mut dgamma = vec![T::zero(); dcols];
    let mut dbeta = vec![T::zero(); dcols];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    for r in 0..n {
        let xrow = &x.data()[r * dcols..(r + 1) * dcols];
        let drow = &d.data()[r * dcols..(r + 1) * dcols];
        let mean = xrow.iter().copied().sum::<T>() / nd;
        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
        let inv = T::one() / (var + eps).sqrt();
        // accumulate affine grads and the two row means needed for dx
        let mut m1 = T::zero(); // mean of gamma*d
        let mut m2 = T::zero(); // mean of gamma*d*xhat
        for j in 0..dcols {
            let xhat = (xrow[j] - mean) * inv;
            dgamma[j] += drow[j] * xhat;
            dbeta[j] += drow[j];
            let gd = g[j] * drow[j];
            m1 += gd;
            m2 += gd * xhat;
        }
        m1 = m1 / nd;
        m2 = m2 / nd;
        if let Some(dx) = dx.as_mut() {
            let dxrow = &mut dx.data_mut()[r * dcols..(r + 1) * dcols];
            for j in 0..dcols {
                let xhat = (xrow[j] - mean) * inv;
                dxrow[j] = (g[j] * drow[j] - m1 - xhat * m2) * inv;
            }
        }
    }
    let dg = Tensor::new(&[dcols], dgamma).expect("sized");
    let db = Tensor::new(&[dcols], dbeta).expect("sized");
    (dx, dg, db)
}
