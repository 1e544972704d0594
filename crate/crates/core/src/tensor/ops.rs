//! Forward kernels shared by the tape and by no-grad evaluation paths.
//!
//! Convolution is lowered to im2col + GEMM; the column layout is
//! `row = (n*OH + oy)*OW + ox`, `col = (ci*K + ky)*K + kx`, which lines up
//! with the flat `[CO, C, K, K]` weight layout so both the forward pass and
//! the weight gradient are single GEMM calls.

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

pub fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.data().as_ptr(), k as isize, 1,
            b.data().as_ptr(), n as isize, 1,
            T::zero(),
            out.data_mut().as_mut_ptr(), n as isize, 1,
        );
    }
    Ok(out)
}

/// a * b^T for row-major operands: `[m x k] * [n x k] -> [m x n]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = dims2(a, "matmul_nt")?;
    let (n, k2) = dims2(b, "matmul_nt")?;
    if k != k2 {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.data().as_ptr(), k as isize, 1,
            b.data().as_ptr(), 1, k as isize,
            T::zero(),
            out.data_mut().as_mut_ptr(), n as isize, 1,
        );
    }
    Ok(out)
}

/// a^T * b for row-major operands: `[k x m] * [k x n] -> [m x n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (k, m) = dims2(a, "matmul_tn")?;
    let (k2, n) = dims2(b, "matmul_tn")?;
    if k != k2 {
        return Err(shape_err("matmul_tn", a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.data().as_ptr(), 1, m as isize,
            b.data().as_ptr(), n as isize, 1,
            T::zero(),
            out.data_mut().as_mut_ptr(), n as isize, 1,
        );
    }
    Ok(out)
}

pub fn add_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a, b));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// `[m x n] + [1 x n]` with the row broadcast over every row of `a`.
pub fn add_row<T: Scalar>(a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (_, n) = dims2(a, "add_row")?;
    let rn = if row.rank() == 2 && row.shape()[0] == 1 {
        row.shape()[1]
    } else if row.rank() == 1 {
        row.shape()[0]
    } else {
        return Err(shape_err("add_row", a, row));
    };
    if rn != n {
        return Err(shape_err("add_row", a, row));
    }
    let mut out = a.clone();
    for chunk in out.data_mut().chunks_mut(n) {
        for (o, &v) in chunk.iter_mut().zip(row.data()) {
            *o += v;
        }
    }
    Ok(out)
}

pub fn mul_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a, b));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    Ok(out)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let mut out = a.clone();
    for o in out.data_mut() {
        *o *= c;
    }
    out
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for o in out.data_mut() {
        if *o < T::zero() {
            *o = T::zero();
        }
    }
    out
}

/// tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let c = T::cast(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::cast(0.044715);
    let half = T::cast(0.5);
    let mut out = a.clone();
    for o in out.data_mut() {
        let x = *o;
        let u = c * (x + k * x * x * x);
        *o = half * x * (T::one() + u.tanh());
    }
    out
}

/// Derivative of the tanh-form GELU, used by the tape.
pub fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::cast(0.797_884_560_802_865_4);
    let k = T::cast(0.044715);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Softmax along `axis`, restricted to unmasked entries; masked entries are
/// exactly zero in the output. A lane with no unmasked entry is an error.
pub fn masked_softmax<T: Scalar>(
    x: &Tensor<T>,
    mask: &[bool],
    axis: usize,
) -> Result<Tensor<T>, TensorError> {
    if axis >= x.rank() {
        return Err(TensorError::AxisOutOfRange { op: "masked_softmax", axis, rank: x.rank() });
    }
    if mask.len() != x.numel() {
        return Err(TensorError::DataLength {
            op: "masked_softmax",
            shape: x.shape().to_vec(),
            expected: x.numel(),
            got: mask.len(),
        });
    }
    let dim = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = Tensor::zeros(x.shape());
    let xv = x.data();
    let ov = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let lane = o * inner + i;
            let base = o * dim * inner + i;
            let mut mx = T::neg_infinity();
            for t in 0..dim {
                let p = base + t * inner;
                if mask[p] && xv[p] > mx {
                    mx = xv[p];
                }
            }
            if mx == T::neg_infinity() {
                return Err(TensorError::DegenerateSlice { lane });
            }
            let mut denom = T::zero();
            for t in 0..dim {
                let p = base + t * inner;
                if mask[p] {
                    let e = (xv[p] - mx).exp();
                    ov[p] = e;
                    denom += e;
                }
            }
            for t in 0..dim {
                let p = base + t * inner;
                if mask[p] {
                    ov[p] /= denom;
                }
            }
        }
    }
    Ok(out)
}

/// Row-wise layer norm for `[n x d]` with affine `gamma`, `beta` of length d.
/// Normalization uses the population variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (_, d) = dims2(x, "layer_norm")?;
    if gamma.numel() != d || beta.numel() != d {
        return Err(shape_err("layer_norm", x, if gamma.numel() != d { gamma } else { beta }));
    }
    let mut out = Tensor::zeros(x.shape());
    let nd = T::cast(d as f64);
    let g = gamma.data();
    let b = beta.data();
    for (xrow, orow) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
        let mean = xrow.iter().copied().sum::<T>() / nd;
        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
        let inv = T::one() / (var + eps).sqrt();
        for j in 0..d {
            orow[j] = g[j] * ((xrow[j] - mean) * inv) + b[j];
        }
    }
    Ok(out)
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize) -> Option<usize> {
    if k > input || stride == 0 {
        return None;
    }
    Some((input - k) / stride + 1)
}

/// Valid (no padding) 2-D convolution: x `[N, C, H, W]`, w `[CO, C, K, K]`,
/// bias `[CO]`, square kernel and symmetric stride.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, wd) = dims4(x, "conv2d")?;
    let (co, cw, k, k2) = dims4(w, "conv2d")?;
    if cw != c || k != k2 {
        return Err(shape_err("conv2d", x, w));
    }
    if b.numel() != co {
        return Err(shape_err("conv2d", w, b));
    }
    let (oh, ow) = match (conv_out_dim(h, k, stride), conv_out_dim(wd, k, stride)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(TensorError::KernelDoesNotFit { k, stride, h, w: wd }),
    };
    let cols = im2col(x, n, c, h, wd, k, stride, oh, ow);
    let ckk = c * k * k;
    let rows = n * oh * ow;
    // out_rows[rows x co] = cols [rows x ckk] * w^T
    let mut out_rows = vec![T::zero(); rows * co];
    unsafe {
        T::gemm(
            rows, ckk, co, T::one(),
            cols.as_ptr(), ckk as isize, 1,
            w.data().as_ptr(), 1, ckk as isize,
            T::zero(),
            out_rows.as_mut_ptr(), co as isize, 1,
        );
    }
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let od = out.data_mut();
    let bd = b.data();
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((ni * oh) + oy) * ow + ox;
                for ci in 0..co {
                    od[((ni * co + ci) * oh + oy) * ow + ox] = out_rows[r * co + ci] + bd[ci];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight, and bias. The
/// input gradient is skipped when `want_dx` is false (constant inputs).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    d_out: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (d_out.shape()[2], d_out.shape()[3]);
    let rows = n * oh * ow;
    let ckk = c * k * k;

    // d_out in [rows x co] layout, plus the bias gradient in the same pass.
    let mut dout_rows = vec![T::zero(); rows * co];
    let mut db = Tensor::zeros(&[co]);
    {
        let dbv = db.data_mut();
        let dov = d_out.data();
        for ni in 0..n {
            for ci in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = dov[((ni * co + ci) * oh + oy) * ow + ox];
                        dout_rows[(((ni * oh) + oy) * ow + ox) * co + ci] = v;
                        dbv[ci] += v;
                    }
                }
            }
        }
    }

    let cols = im2col(x, n, c, h, wd, k, stride, oh, ow);
    // dW [co x ckk] = dout_rows^T * cols
    let mut dw = Tensor::zeros(w.shape());
    unsafe {
        T::gemm(
            co, rows, ckk, T::one(),
            dout_rows.as_ptr(), 1, co as isize,
            cols.as_ptr(), ckk as isize, 1,
            T::zero(),
            dw.data_mut().as_mut_ptr(), ckk as isize, 1,
        );
    }
    if !want_dx {
        return (None, dw, db);
    }
    // d_cols [rows x ckk] = dout_rows * w, then scatter back to the input.
    let mut dcols = vec![T::zero(); rows * ckk];
    unsafe {
        T::gemm(
            rows, co, ckk, T::one(),
            dout_rows.as_ptr(), co as isize, 1,
            w.data().as_ptr(), ckk as isize, 1,
            T::zero(),
            dcols.as_mut_ptr(), ckk as isize, 1,
        );
    }
    let mut dx = Tensor::zeros(x.shape());
    let dxv = dx.data_mut();
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((ni * oh) + oy) * ow + ox;
                let row = &dcols[r * ckk..(r + 1) * ckk];
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        let base = ((ni * c + ci) * h + iy) * wd + ox * stride;
                        let cbase = (ci * k + ky) * k;
                        for kx in 0..k {
                            dxv[base + kx] += row[cbase + kx];
                        }
                    }
                }
            }
        }
    }
    (Some(dx), dw, db)
}

fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); n * oh * ow * ckk];
    let xv = x.data();
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((ni * oh) + oy) * ow + ox;
                let dst = &mut cols[r * ckk..(r + 1) * ckk];
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        let src = ((ni * c + ci) * h + iy) * w + ox * stride;
                        let cbase = (ci * k + ky) * k;
                        dst[cbase..cbase + k].copy_from_slice(&xv[src..src + k]);
                    }
                }
            }
        }
    }
    cols
}

/// Mean over the two trailing spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn spatial_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = dims4(x, "spatial_mean")?;
    let hw = T::cast((h * w) as f64);
    let data: Vec<T> = x
        .data()
        .chunks(h * w)
        .map(|chunk| chunk.iter().copied().sum::<T>() / hw)
        .collect();
    Tensor::new(&[n, c], data)
}

/// Mean along one axis of a rank-2 tensor; the reduced axis keeps size 1.
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    let (m, n) = dims2(x, "mean_pool")?;
    match axis {
        0 => {
            let mut out = Tensor::zeros(&[1, n]);
            let ov = out.data_mut();
            for row in x.data().chunks(n) {
                for (o, &v) in ov.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = T::one() / T::cast(m as f64);
            for o in ov.iter_mut() {
                *o *= inv;
            }
            Ok(out)
        }
        1 => {
            let mut out = Tensor::zeros(&[m, 1]);
            let inv = T::one() / T::cast(n as f64);
            for (o, row) in out.data_mut().iter_mut().zip(x.data().chunks(n)) {
                *o = row.iter().copied().sum::<T>() * inv;
            }
            Ok(out)
        }
        _ => Err(TensorError::AxisOutOfRange { op: "mean_pool", axis, rank: 2 }),
    }
}

/// Concatenate rank-2 tensors along rows (axis 0) or columns (axis 1).
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        });
    }
    let first = parts[0];
    let (_, cols0) = dims2(first, "concat")?;
    let rows0 = first.shape()[0];
    match axis {
        0 => {
            let mut rows = 0;
            for p in parts {
                let (r, c) = dims2(p, "concat")?;
                if c != cols0 {
                    return Err(shape_err("concat", first, p));
                }
                rows += r;
            }
            let mut data = Vec::with_capacity(rows * cols0);
            for p in parts {
                data.extend_from_slice(p.data());
            }
            Tensor::new(&[rows, cols0], data)
        }
        1 => {
            let mut cols = 0;
            for p in parts {
                let (r, c) = dims2(p, "concat")?;
                if r != rows0 {
                    return Err(shape_err("concat", first, p));
                }
                cols += c;
            }
            let mut out = Tensor::zeros(&[rows0, cols]);
            let ov = out.data_mut();
            for r in 0..rows0 {
                let mut off = 0;
                for p in parts {
                    let c = p.shape()[1];
                    ov[r * cols + off..r * cols + off + c].copy_from_slice(p.row(r));
                    off += c;
                }
            }
            Ok(out)
        }
        _ => Err(TensorError::AxisOutOfRange { op: "concat", axis, rank: 2 }),
    }
}

/// Numerically stable binary cross-entropy on a logit:
/// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logits<T: Scalar>(z: T, y: T) -> T {
    let zero = T::zero();
    let pos = if z > zero { z } else { zero };
    pos - z * y + (-z.abs()).exp().ln_1p()
}

fn dims2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected rank 2".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
    if t.rank() != 4 {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected rank 4".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]))
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}
