// Value-level kernels shared by the tape's forward and backward passes.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` read through `out_shape`, zero on stretched axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out_shape))
        .map(|(s, (&d, &o))| if d == o { s } else { 0 })
        .collect()
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, a, b)),
        })
        .collect()
}

/// Walks every index of `out_shape` in row-major order, handing the callback
/// the flat output index and the matching offsets into two broadcast inputs.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::raw(a.shape.clone(), data));
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = vec![0.0; out_shape.iter().product()];
    for_each_broadcast(&out_shape, &sa, &sb, |i, oa, ob| {
        data[i] = f(a.data[oa], b.data[ob]);
    });
    Ok(Tensor::raw(out_shape, data))
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape, &grad.shape);
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(&grad.shape, &st, &st, |i, o, _| {
        data[o] += grad.data[i];
    });
    Tensor::raw(shape.to_vec(), data)
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// A read-only strided matrix view: element `(i, j)` lives at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c += a · b` with `a: [m, k]`, `b: [k, n]` and row-major `c: [m, n]`.
fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64]) {
    assert!(a.covers(m, k) && b.covers(k, n) && c.len() >= m * n, "gemm operands out of bounds");
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above keeps every index the routine touches
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn batch_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape.as_slice() {
        &[m, n] => Ok((1, m, n)),
        &[b, m, n] => Ok((b, m, n)),
        other => Err(shape_err("matmul", other, &[])),
    }
}

/// Matrix product with an optional leading batch axis on either side; a
/// rank-2 operand is shared across the other operand's batch.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, k) = batch_dims(a)?;
    let (bb, k2, n) = batch_dims(b)?;
    if k != k2 || (ba != bb && ba != 1 && bb != 1) {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let batch = ba.max(bb);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ao = if ba == 1 { 0 } else { bi * m * k };
        let bo = if bb == 1 { 0 } else { bi * k * n };
        gemm(
            m,
            k,
            n,
            View::rows(&a.data[ao..], k),
            View::rows(&b.data[bo..], n),
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    let shape = if a.rank() == 3 || b.rank() == 3 {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    Ok(Tensor::raw(shape, out))
}

/// `g · bᵀ` summed onto the shape of `a`, for the left operand of `matmul`.
pub(crate) fn matmul_grad_a(g: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    let (ba, m, k) = batch_dims(a).expect("validated in forward");
    let (bb, _, n) = batch_dims(b).expect("validated in forward");
    let mut out = vec![0.0; a.len()];
    for bi in 0..ba.max(bb) {
        let ao = if ba == 1 { 0 } else { bi * m * k };
        let bo = if bb == 1 { 0 } else { bi * k * n };
        gemm(
            m,
            n,
            k,
            View::rows(&g.data[bi * m * n..], n),
            View::transposed(&b.data[bo..], n),
            &mut out[ao..ao + m * k],
        );
    }
    Tensor::raw(a.shape.clone(), out)
}

/// `aᵀ · g` summed onto the shape of `b`, for the right operand of `matmul`.
pub(crate) fn matmul_grad_b(g: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    let (ba, m, k) = batch_dims(a).expect("validated in forward");
    let (bb, _, n) = batch_dims(b).expect("validated in forward");
    let mut out = vec![0.0; b.len()];
    for bi in 0..ba.max(bb) {
        let ao = if ba == 1 { 0 } else { bi * m * k };
        let bo = if bb == 1 { 0 } else { bi * k * n };
        gemm(
            k,
            m,
            n,
            View::transposed(&a.data[ao..], k),
            View::rows(&g.data[bi * m * n..], n),
            &mut out[bo..bo + k * n],
        );
    }
    Tensor::raw(b.shape.clone(), out)
}

pub(crate) fn transpose(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(shape_err("transpose", &x.shape, &[]));
    }
    let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
    let batch = x.len() / (m * n);
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let o = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[o + j * m + i] = x.data[o + i * n + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::raw(shape, out))
}

/// Output shape after removing `axis`; a rank-1 input reduces to shape `[1]`.
pub(crate) fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub(crate) fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &x.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let inv = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::raw(reduced_shape(&x.shape, axis), out))
}

/// Inverse of `mean_axis` for gradients: spreads `g / len` along `axis`.
pub(crate) fn expand_mean_grad(g: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(in_shape, axis).expect("validated in forward");
    let inv = 1.0 / len as f64;
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            let dst = &mut out[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(&g.data[o * inner..(o + 1) * inner]) {
                *d = s * inv;
            }
        }
    }
    Tensor::raw(in_shape.to_vec(), out)
}

/// Applies `f` to every line along `axis`, reading from `x` and writing to a
/// fresh buffer of the same shape.
fn map_lines(x: &Tensor, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    let mut out = vec![0.0; x.len()];
    let mut line = vec![0.0; len];
    let mut res = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for l in 0..len {
                line[l] = x.data[(o * len + l) * inner + i];
            }
            f(&line, &mut res);
            for l in 0..len {
                out[(o * len + l) * inner + i] = res[l];
            }
        }
    }
    Ok(Tensor::raw(x.shape.clone(), out))
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    map_lines(x, axis, |line, out| {
        let max = line.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(line) {
            *o = (v - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
    })
}

pub(crate) fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    map_lines(x, axis, |line, out| {
        let max = line.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + line.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out.iter_mut().zip(line) {
            *o = v - lse;
        }
    })
}

/// Sum of `a * b` along `axis`, kept as a singleton axis.
pub(crate) fn dot_along(a: &Tensor, b: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(&a.shape, axis).expect("validated in forward");
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let k = (o * len + l) * inner + i;
                out[o * inner + i] += a.data[k] * b.data[k];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape[axis] = 1;
    Tensor::raw(shape, out)
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv_dims(x: &Tensor, kernel: &Tensor) -> Result<ConvDims> {
    let (batch, c_in, h, w) = match x.shape.as_slice() {
        &[c, h, w] => (1, c, h, w),
        &[b, c, h, w] => (b, c, h, w),
        other => return Err(shape_err("conv2d", other, &kernel.shape)),
    };
    let &[c_out, kc, k1, k2] = kernel.shape.as_slice() else {
        return Err(shape_err("conv2d", &x.shape, &kernel.shape));
    };
    if kc != c_in || k1 != k2 {
        return Err(shape_err("conv2d", &x.shape, &kernel.shape));
    }
    if k1 % 2 == 0 {
        return Err(Error::EvenKernel(k1));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        h,
        w,
        k: k1,
    })
}

/// Output index span `[lo, hi)` whose inputs for kernel tap `tap` fall inside
/// the plane under zero padding `pad`.
#[inline]
fn tap_range(extent: usize, tap: usize, pad: usize) -> (usize, usize) {
    // output index i reads input index i + tap - pad
    let lo = pad.saturating_sub(tap);
    let hi = (extent + pad).saturating_sub(tap).min(extent);
    (lo, hi.max(lo))
}

/// Unfolds one `[c_in, h, w]` plane stack into `[c_in * k * k, h * w]`
/// columns under "same" zero padding.
fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let pad = (k - 1) / 2;
    let plane = h * w;
    col.fill(0.0);
    for c in 0..d.c_in {
        let src = &x[c * plane..(c + 1) * plane];
        for u in 0..k {
            let (i0, i1) = tap_range(h, u, pad);
            for v in 0..k {
                let (j0, j1) = tap_range(w, v, pad);
                let row = &mut col[((c * k + u) * k + v) * plane..][..plane];
                for i in i0..i1 {
                    let si = (i + u - pad) * w + v;
                    row[i * w + j0..i * w + j1].copy_from_slice(&src[si + j0 - pad..si + j1 - pad]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto the planes.
fn col2im(col: &[f64], d: &ConvDims, x: &mut [f64]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let pad = (k - 1) / 2;
    let plane = h * w;
    for c in 0..d.c_in {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for u in 0..k {
            let (i0, i1) = tap_range(h, u, pad);
            for v in 0..k {
                let (j0, j1) = tap_range(w, v, pad);
                let row = &col[((c * k + u) * k + v) * plane..][..plane];
                for i in i0..i1 {
                    let si = (i + u - pad) * w + v;
                    let drow = &mut dst[si + j0 - pad..si + j1 - pad];
                    for (d, &s) in drow.iter_mut().zip(&row[i * w + j0..i * w + j1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let d = conv_dims(x, kernel)?;
    let plane = d.h * d.w;
    let taps = d.c_in * d.k * d.k;
    let mut col = vec![0.0; taps * plane];
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    for b in 0..d.batch {
        im2col(&x.data[b * d.c_in * plane..(b + 1) * d.c_in * plane], &d, &mut col);
        gemm(
            d.c_out,
            taps,
            plane,
            View::rows(&kernel.data, taps),
            View::rows(&col, plane),
            &mut out[b * d.c_out * plane..(b + 1) * d.c_out * plane],
        );
    }
    let shape = if x.rank() == 4 {
        vec![d.batch, d.c_out, d.h, d.w]
    } else {
        vec![d.c_out, d.h, d.w]
    };
    Ok(Tensor::raw(shape, out))
}

/// Gradients of `conv2d` with respect to the input and the kernel; either
/// can be skipped when nothing upstream needs it.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = conv_dims(x, kernel).expect("validated in forward");
    let plane = d.h * d.w;
    let taps = d.c_in * d.k * d.k;
    let mut col = vec![0.0; if want_k { taps * plane } else { 0 }];
    let mut dcol = vec![0.0; if want_x { taps * plane } else { 0 }];
    let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
    let mut dk = vec![0.0; if want_k { kernel.len() } else { 0 }];
    for b in 0..d.batch {
        let xs = b * d.c_in * plane..(b + 1) * d.c_in * plane;
        let gb = &g.data[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        if want_k {
            im2col(&x.data[xs.clone()], &d, &mut col);
            gemm(
                d.c_out,
                plane,
                taps,
                View::rows(gb, plane),
                View::transposed(&col, plane),
                &mut dk,
            );
        }
        if want_x {
            dcol.fill(0.0);
            gemm(
                taps,
                d.c_out,
                plane,
                View::transposed(&kernel.data, taps),
                View::rows(gb, plane),
                &mut dcol,
            );
            col2im(&dcol, &d, &mut dx[xs]);
        }
    }
    (
        want_x.then(|| Tensor::raw(x.shape.clone(), dx)),
        want_k.then(|| Tensor::raw(kernel.shape.clone(), dk)),
    )
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptySequence)?;
    let (outer, _, inner) = split_axis(&first.shape, axis)?;
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", &first.shape, &p.shape));
        }
        total += p.shape[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::raw(shape, out))
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, ext, inner) = split_axis(&x.shape, axis)?;
    if len == 0 || start + len > ext {
        return Err(shape_err("slice", &x.shape, &[start, len]));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::raw(shape, out))
}

/// Adds `g` into the `[start, start + len)` window of a zero tensor shaped
/// like the slice source.
pub(crate) fn unslice(g: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, ext, inner) = split_axis(in_shape, axis).expect("validated in forward");
    let len = g.shape[axis];
    let mut out = vec![0.0; outer * ext * inner];
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out[base..base + len * inner]
            .copy_from_slice(&g.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::raw(in_shape.to_vec(), out)
}
