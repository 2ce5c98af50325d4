//! Forward and backward kernels over plain [`Tensor`] values.
//!
//! Everything here is a pure function. The tape in [`crate::autodiff`]
//! records which kernel produced a value and calls the matching backward
//! kernel during the reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// `sqrt(2 / pi)`, the tanh-GELU input scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

// ---------------------------------------------------------------------------
// dense matrix kernels (accumulate into `out`)

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Resolved operand layout for [`matmul`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch of `a`.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err(format!("matmul needs rank >= 2 operands, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(shape_err(format!("matmul inner extents differ: {a:?} x {b:?}")));
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared_rhs = lead_b.is_empty();
    if !shared_rhs && lead_a != lead_b {
        return Err(shape_err(format!("matmul leading axes differ: {a:?} x {b:?}")));
    }
    let mut out_shape = lead_a.to_vec();
    out_shape.extend([m, n]);
    Ok((MatmulDims { batch: numel(lead_a), m, k, n, shared_rhs }, out_shape))
}

/// Matrix product over the trailing two axes. Leading axes must match, or
/// `b` may be a plain matrix broadcast over every leading index of `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, out_shape) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; numel(&out_shape)];
    if d.shared_rhs {
        gemm_nn(a.data(), b.data(), &mut out, d.batch * d.m, d.k, d.n);
    } else {
        let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for t in 0..d.batch {
            gemm_nn(
                &a.data()[t * sa..(t + 1) * sa],
                &b.data()[t * sb..(t + 1) * sb],
                &mut out[t * so..(t + 1) * so],
                d.m,
                d.k,
                d.n,
            );
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, _) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    if d.shared_rhs {
        let rows = d.batch * d.m;
        gemm_nt(grad, b.data(), &mut ga, rows, d.n, d.k);
        gemm_tn(a.data(), grad, &mut gb, d.k, rows, d.n);
    } else {
        let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for t in 0..d.batch {
            let g = &grad[t * so..(t + 1) * so];
            gemm_nt(g, &b.data()[t * sb..(t + 1) * sb], &mut ga[t * sa..(t + 1) * sa], d.m, d.n, d.k);
            gemm_tn(&a.data()[t * sa..(t + 1) * sa], g, &mut gb[t * sb..(t + 1) * sb], d.k, d.m, d.n);
        }
    }
    (ga, gb)
}

/// Swap the trailing two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(shape_err(format!("transpose needs rank >= 2, got {:?}", x.shape())));
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.swap(r - 2, r - 1);
    permute(x, &order)
}

// ---------------------------------------------------------------------------
// linear

fn linear_dims(x: &[usize], w: &[usize], bias: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    if w.len() != 2 {
        return Err(shape_err(format!("linear weight must be [d_in, d_out], got {w:?}")));
    }
    let d_in = *x.last().ok_or_else(|| shape_err("linear input has no axes"))?;
    if d_in != w[0] {
        return Err(shape_err(format!("linear input {x:?} does not match weight {w:?}")));
    }
    if let Some(b) = bias {
        if b != [w[1]] {
            return Err(shape_err(format!("linear bias {b:?} does not match weight {w:?}")));
        }
    }
    Ok((numel(x) / d_in, d_in, w[1]))
}

/// `x · w + bias` over the trailing axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, d_in, d_out) = linear_dims(x.shape(), w.shape(), bias.map(Tensor::shape))?;
    let mut out = match bias {
        Some(b) => {
            let mut v = Vec::with_capacity(rows * d_out);
            for _ in 0..rows {
                v.extend_from_slice(b.data());
            }
            v
        }
        None => vec![0.0; rows * d_out],
    };
    gemm_nn(x.data(), w.data(), &mut out, rows, d_in, d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("checked") = d_out;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / d_in;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; d_out];
    gemm_nt(grad, w.data(), &mut gx, rows, d_out, d_in);
    gemm_tn(x.data(), grad, &mut gw, d_in, rows, d_out);
    for row in grad.chunks_exact(d_out) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// broadcasting element-wise binaries

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside an `out_rank` broadcast, with zero
/// stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] })
        .collect()
}

/// For every row-major position of `shape`, the linear offset under
/// `strides`.
pub(crate) fn mapped_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    let mut coord = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for ax in (0..shape.len()).rev() {
            coord[ax] += 1;
            offset += strides[ax];
            if coord[ax] < shape[ax] {
                break;
            }
            offset -= strides[ax] * shape[ax];
            coord[ax] = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

pub fn binary(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = match kind {
        BinaryKind::Add => |x: f64, y: f64| x + y,
        BinaryKind::Mul => |x: f64, y: f64| x * y,
    };
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = mapped_offsets(&out_shape, &broadcast_strides(a.shape(), &out_shape));
    let ob = mapped_offsets(&out_shape, &broadcast_strides(b.shape(), &out_shape));
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sum `grad` (laid out as `out_shape`) down to `shape`, undoing a broadcast.
pub(crate) fn unbroadcast(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let offsets = mapped_offsets(out_shape, &broadcast_strides(shape, out_shape));
    let mut out = vec![0.0; numel(shape)];
    for (g, &o) in grad.iter().zip(&offsets) {
        out[o] += g;
    }
    out
}

pub(crate) fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    match kind {
        BinaryKind::Add => (
            unbroadcast(grad, out_shape, a.shape()),
            unbroadcast(grad, out_shape, b.shape()),
        ),
        BinaryKind::Mul => {
            let (ga_full, gb_full): (Vec<f64>, Vec<f64>) = if a.shape() == b.shape() {
                grad.iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (x, y))| (g * y, g * x))
                    .unzip()
            } else {
                let oa = mapped_offsets(out_shape, &broadcast_strides(a.shape(), out_shape));
                let ob = mapped_offsets(out_shape, &broadcast_strides(b.shape(), out_shape));
                grad.iter()
                    .zip(oa.iter().zip(&ob))
                    .map(|(g, (&i, &j))| (g * b.data()[j], g * a.data()[i]))
                    .unzip()
            };
            (
                unbroadcast(&ga_full, out_shape, a.shape()),
                unbroadcast(&gb_full, out_shape, b.shape()),
            )
        }
    }
}

// ---------------------------------------------------------------------------
// unary element-wise

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Scale(f64),
    Gelu,
    Sigmoid,
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn unary(kind: UnaryKind, x: &Tensor) -> Tensor {
    match kind {
        UnaryKind::Scale(c) => x.map(|v| c * v),
        UnaryKind::Gelu => x.map(gelu_scalar),
        UnaryKind::Sigmoid => x.map(sigmoid_scalar),
    }
}

pub(crate) fn unary_backward(kind: UnaryKind, x: &Tensor, y: &Tensor, grad: &[f64]) -> Vec<f64> {
    match kind {
        UnaryKind::Scale(c) => grad.iter().map(|g| c * g).collect(),
        UnaryKind::Gelu => grad.iter().zip(x.data()).map(|(g, &v)| g * gelu_derivative(v)).collect(),
        UnaryKind::Sigmoid => grad.iter().zip(y.data()).map(|(g, &s)| g * s * (1.0 - s)).collect(),
    }
}

// ---------------------------------------------------------------------------
// softmax

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::AxisOutOfBounds { axis, rank })
    } else {
        Ok(())
    }
}

/// (outer, len, inner) decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Softmax along `axis`, subtracting the per-slice maximum first.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, grad: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_at_axis(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let dot: f64 = (0..len).map(|j| grad[at(j)] * yd[at(j)]).sum();
            for j in 0..len {
                gx[at(j)] = yd[at(j)] * (grad[at(j)] - dot);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// layer norm

/// Layer normalization over the trailing axis with affine `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| shape_err("layer_norm input has no axes"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err(format!(
            "layer_norm affine {:?}/{:?} does not match trailing extent {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let (mean, rstd) = row_stats(row, eps);
        for ((v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v - mean) * rstd * g + b);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.numel();
    let mut gx = Vec::with_capacity(x.numel());
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (row, grow) in x.data().chunks_exact(d).zip(grad.chunks_exact(d)) {
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = grow[j] * gamma.data()[j];
            gg[j] += grow[j] * xhat[j];
            gb[j] += grow[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gx.push(rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx));
        }
    }
    (gx, gg, gb)
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions { stride: 1, pad: 0, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_per_group: usize,
    cout_per_group: usize,
}

/// Output extent of a strided, padded window sweep. Partial trailing
/// windows are dropped, as in every mainstream framework.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(Error::NonIntegralOutputExtent(format!(
            "extent {size} with kernel {kernel}, stride {stride}, pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn conv_geometry(x: &[usize], w: &[usize], bias: &[usize], o: Conv2dOptions) -> Result<ConvGeometry> {
    if x.len() != 4 || w.len() != 4 {
        return Err(shape_err(format!("conv2d expects rank-4 input and weight, got {x:?}, {w:?}")));
    }
    let (batch, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
    let (c_out, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if o.groups == 0 || c_in % o.groups != 0 || c_out % o.groups != 0 {
        return Err(shape_err(format!(
            "channels {c_in}->{c_out} not divisible by groups {}",
            o.groups
        )));
    }
    if cin_g != c_in / o.groups {
        return Err(shape_err(format!("conv2d weight {w:?} does not match input {x:?}")));
    }
    if bias != [c_out] {
        return Err(shape_err(format!("conv2d bias {bias:?} does not match {c_out} outputs")));
    }
    Ok(ConvGeometry {
        batch,
        c_in,
        h,
        w: wd,
        c_out,
        kh,
        kw,
        oh: conv_out_extent(h, kh, o.stride, o.pad)?,
        ow: conv_out_extent(wd, kw, o.stride, o.pad)?,
        cin_per_group: cin_g,
        cout_per_group: c_out / o.groups,
    })
}

/// Output positions `o` in `[lo, hi)` whose input tap `o*stride + k - pad`
/// lies inside `[0, size)`.
fn valid_range(k: usize, size: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Direct 2-D cross-correlation on NCHW input.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, o: Conv2dOptions) -> Result<Tensor> {
    let g = conv_geometry(x.shape(), w.shape(), bias.shape(), o)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let group = co / g.cout_per_group;
            let plane = &mut out[(b * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
            plane.fill(bias.data()[co]);
            for cl in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cl;
                let xplane = &xd[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.h, g.oh, o.stride, o.pad);
                    for kx in 0..g.kw {
                        let wv = wd[((co * g.cin_per_group + cl) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = valid_range(kx, g.w, g.ow, o.stride, o.pad);
                        for oy in oy0..oy1 {
                            let iy = oy * o.stride + ky - o.pad;
                            let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * o.stride + kx - o.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.oh, g.ow], out))
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    o: Conv2dOptions,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = conv_geometry(x.shape(), w.shape(), &[w.shape()[0]], o).expect("validated in forward");
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let group = co / g.cout_per_group;
            let gplane = &grad[(b * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
            gb[co] += gplane.iter().sum::<f64>();
            for cl in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cl;
                let plane_off = (b * g.c_in + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.h, g.oh, o.stride, o.pad);
                    for kx in 0..g.kw {
                        let widx = ((co * g.cin_per_group + cl) * g.kh + ky) * g.kw + kx;
                        let wv = wd[widx];
                        let (ox0, ox1) = valid_range(kx, g.w, g.ow, o.stride, o.pad);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * o.stride + ky - o.pad;
                            let row_off = plane_off + iy * g.w;
                            for ox in ox0..ox1 {
                                let ix = ox * o.stride + kx - o.pad;
                                let gv = gplane[oy * g.ow + ox];
                                acc += gv * xd[row_off + ix];
                                gx[row_off + ix] += gv * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// reductions

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

fn reduce_layout(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        check_axis(a, shape.len())?;
        if seen[a] {
            return Err(shape_err(format!("duplicate reduction axis {a}")));
        }
        seen[a] = true;
    }
    let kept: Vec<usize> = (0..shape.len()).filter(|&i| !seen[i]).map(|i| shape[i]).collect();
    let kept_strides = strides(&kept);
    let mut k = 0;
    let in_strides = (0..shape.len())
        .map(|i| {
            if seen[i] {
                0
            } else {
                k += 1;
                kept_strides[k - 1]
            }
        })
        .collect();
    let count = axes.iter().map(|&a| shape[a]).product();
    let out_shape = if kept.is_empty() { vec![1] } else { kept };
    Ok((out_shape, in_strides, count))
}

/// Sum or mean over `axes`; reduced axes are removed (a full reduction
/// yields shape `[1]`).
pub fn reduce(kind: ReduceKind, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (out_shape, in_strides, count) = reduce_layout(x.shape(), axes)?;
    let offsets = mapped_offsets(x.shape(), &in_strides);
    let mut out = vec![0.0; numel(&out_shape)];
    for (v, &o) in x.data().iter().zip(&offsets) {
        out[o] += v;
    }
    if kind == ReduceKind::Mean {
        let inv = count as f64;
        out.iter_mut().for_each(|v| *v /= inv);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn reduce_backward(kind: ReduceKind, x: &Tensor, axes: &[usize], grad: &[f64]) -> Vec<f64> {
    let (_, in_strides, count) = reduce_layout(x.shape(), axes).expect("validated in forward");
    let scale = match kind {
        ReduceKind::Sum => 1.0,
        ReduceKind::Mean => 1.0 / count as f64,
    };
    mapped_offsets(x.shape(), &in_strides).iter().map(|&o| grad[o] * scale).collect()
}

// ---------------------------------------------------------------------------
// layout

pub(crate) fn check_permutation(rank: usize, order: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if order.len() != rank {
        return Err(Error::InvalidPermutation(order.to_vec()));
    }
    for &a in order {
        if a >= rank || seen[a] {
            return Err(Error::InvalidPermutation(order.to_vec()));
        }
        seen[a] = true;
    }
    Ok(())
}

fn permute_offsets(shape: &[usize], order: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let src = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = order.iter().map(|&a| src[a]).collect();
    let offsets = mapped_offsets(&out_shape, &perm_strides);
    (out_shape, offsets)
}

/// Reorder axes: output axis `i` is input axis `order[i]`.
pub fn permute(x: &Tensor, order: &[usize]) -> Result<Tensor> {
    check_permutation(x.rank(), order)?;
    let (out_shape, offsets) = permute_offsets(x.shape(), order);
    let data = offsets.iter().map(|&o| x.data()[o]).collect();
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn permute_backward(x_shape: &[usize], order: &[usize], grad: &[f64]) -> Vec<f64> {
    let (_, offsets) = permute_offsets(x_shape, order);
    let mut gx = vec![0.0; grad.len()];
    for (g, &o) in grad.iter().zip(&offsets) {
        gx[o] = *g;
    }
    gx
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat of zero tensors"))?;
    check_axis(axis, first.rank())?;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(shape_err(format!(
                "concat along {axis}: {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn concat_backward(shapes: &[Vec<usize>], axis: usize, grad: &[f64]) -> Vec<Vec<f64>> {
    let (outer, _, inner) = split_at_axis(&shapes[0], axis);
    let mut outs: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let mut cursor = 0;
    for _ in 0..outer {
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let block = s[axis] * inner;
            out.extend_from_slice(&grad[cursor..cursor + block]);
            cursor += block;
        }
    }
    outs
}

// ---------------------------------------------------------------------------
// loss

/// Mean binary cross-entropy from logits:
/// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(shape_err(format!(
            "bce logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.numel() as f64)
}

pub(crate) fn bce_backward(logits: &Tensor, target: &Tensor, grad: f64) -> Vec<f64> {
    let scale = grad / logits.numel() as f64;
    logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| (sigmoid_scalar(z) - t) * scale)
        .collect()
}
