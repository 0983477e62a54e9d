//! Forward and backward numeric kernels over plain tensors.
//!
//! These are straightforward loops; [`crate::tape::Tape`] wires them into
//! the gradient tape. Shapes are validated by the callers in `tape`.

use crate::error::{shape_err, Result};
use crate::geometry::ConvGeometry;
use crate::tensor::{axis_split, Tensor};

fn conv_index(out: usize, tap: usize, g: &ConvGeometry) -> Option<usize> {
    let pos = (out * g.stride + tap * g.dilation) as isize - g.padding as isize;
    (pos >= 0 && (pos as usize) < g.input_size).then_some(pos as usize)
}

pub(crate) fn check_conv(
    op: &'static str,
    input: &Tensor,
    kernel_channels: usize,
    kernel_size: usize,
    g: &ConvGeometry,
) -> Result<usize> {
    input.expect_rank(op, 3)?;
    let [_, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    if h != w || h != g.input_size {
        return Err(shape_err(
            op,
            format!(
                "input spatial extent {h}x{w} does not match geometry input size {}",
                g.input_size
            ),
        ));
    }
    if input.shape()[0] != kernel_channels {
        return Err(shape_err(
            op,
            format!(
                "input has {} channels, kernel expects {kernel_channels}",
                input.shape()[0]
            ),
        ));
    }
    if kernel_size != g.kernel_size {
        return Err(shape_err(
            op,
            format!("kernel size {kernel_size} does not match geometry k={}", g.kernel_size),
        ));
    }
    g.output_size()
}

/// `out[o,y,x] = sum_c sum_u sum_v K[o,c,u,v] * in[c, y*s - p + u*r, x*s - p + v*r]`
pub fn conv2d(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    kernel.expect_rank("conv2d", 4)?;
    let ks = kernel.shape();
    if ks[2] != ks[3] {
        return Err(shape_err("conv2d", format!("kernel not square: {ks:?}")));
    }
    let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
    let m_out = check_conv("conv2d", input, c_in, k, g)?;
    let m = g.input_size;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; c_out * m_out * m_out];
    for o in 0..c_out {
        let out_o = &mut out[o * m_out * m_out..(o + 1) * m_out * m_out];
        for c in 0..c_in {
            let x_c = &x[c * m * m..(c + 1) * m * m];
            for u in 0..k {
                for v in 0..k {
                    let w = kd[((o * c_in + c) * k + u) * k + v];
                    if w == 0.0 {
                        continue;
                    }
                    for y in 0..m_out {
                        let Some(iy) = conv_index(y, u, g) else { continue };
                        for xo in 0..m_out {
                            if let Some(ix) = conv_index(xo, v, g) {
                                out_o[y * m_out + xo] += w * x_c[iy * m + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, m_out, m_out], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let ks = kernel.shape();
    let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
    let m = g.input_size;
    let m_out = grad_out.shape()[1];
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kd.len()];
    for o in 0..c_out {
        let go_o = &go[o * m_out * m_out..(o + 1) * m_out * m_out];
        for c in 0..c_in {
            for u in 0..k {
                for v in 0..k {
                    let ki = ((o * c_in + c) * k + u) * k + v;
                    let w = kd[ki];
                    let mut acc = 0.0;
                    for y in 0..m_out {
                        let Some(iy) = conv_index(y, u, g) else { continue };
                        for xo in 0..m_out {
                            if let Some(ix) = conv_index(xo, v, g) {
                                let xi = (c * m + iy) * m + ix;
                                let gval = go_o[y * m_out + xo];
                                acc += x[xi] * gval;
                                gx[xi] += w * gval;
                            }
                        }
                    }
                    gk[ki] += acc;
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).expect("shape"),
        Tensor::new(ks.to_vec(), gk).expect("shape"),
    )
}

/// Per-channel dilated convolution with kernel `[C, k, k]`.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    kernel.expect_rank("depthwise_conv2d", 3)?;
    let ks = kernel.shape();
    if ks[1] != ks[2] {
        return Err(shape_err("depthwise_conv2d", format!("kernel not square: {ks:?}")));
    }
    let (c, k) = (ks[0], ks[1]);
    let m_out = check_conv("depthwise_conv2d", input, c, k, g)?;
    let m = g.input_size;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; c * m_out * m_out];
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let w = kd[(ch * k + u) * k + v];
                for y in 0..m_out {
                    let Some(iy) = conv_index(y, u, g) else { continue };
                    for xo in 0..m_out {
                        if let Some(ix) = conv_index(xo, v, g) {
                            out[(ch * m_out + y) * m_out + xo] += w * x[(ch * m + iy) * m + ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, m_out, m_out], out)
}

pub fn depthwise_conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let ks = kernel.shape();
    let (c, k) = (ks[0], ks[1]);
    let m = g.input_size;
    let m_out = grad_out.shape()[1];
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kd.len()];
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let ki = (ch * k + u) * k + v;
                let w = kd[ki];
                let mut acc = 0.0;
                for y in 0..m_out {
                    let Some(iy) = conv_index(y, u, g) else { continue };
                    for xo in 0..m_out {
                        if let Some(ix) = conv_index(xo, v, g) {
                            let xi = (ch * m + iy) * m + ix;
                            let gval = go[(ch * m_out + y) * m_out + xo];
                            acc += x[xi] * gval;
                            gx[xi] += w * gval;
                        }
                    }
                }
                gk[ki] += acc;
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).expect("shape"),
        Tensor::new(ks.to_vec(), gk).expect("shape"),
    )
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("shape")
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(shape_err(
            "softmax",
            format!("axis {axis} invalid for shape {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (d[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), grad_out.data());
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
            for j in 0..n {
                gx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("shape")
}

/// Source taps for one output coordinate under the align-corners-false
/// convention: `src = (dst + 0.5) * in/out - 0.5`, clamped at the low edge.
fn bilinear_taps(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of a `[C, H, W]` tensor with align-corners-false sampling
/// (pixel centers at half-integer coordinates, edges clamped).
pub fn bilinear_upsample(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    x.expect_rank("bilinear_upsample", 3)?;
    if h_out == 0 || w_out == 0 {
        return Err(shape_err("bilinear_upsample", "zero output extent"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0; c * h_out * w_out];
    for y in 0..h_out {
        let (y0, y1, ly) = bilinear_taps(y, h, h_out);
        for xo in 0..w_out {
            let (x0, x1, lx) = bilinear_taps(xo, w, w_out);
            for ch in 0..c {
                let base = ch * h * w;
                let v = (1.0 - ly) * ((1.0 - lx) * d[base + y0 * w + x0] + lx * d[base + y0 * w + x1])
                    + ly * ((1.0 - lx) * d[base + y1 * w + x0] + lx * d[base + y1 * w + x1]);
                out[(ch * h_out + y) * w_out + xo] = v;
            }
        }
    }
    Tensor::new(vec![c, h_out, w_out], out)
}

pub fn bilinear_upsample_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h_out, w_out) = (grad_out.shape()[1], grad_out.shape()[2]);
    let g = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for y in 0..h_out {
        let (y0, y1, ly) = bilinear_taps(y, h, h_out);
        for xo in 0..w_out {
            let (x0, x1, lx) = bilinear_taps(xo, w, w_out);
            for ch in 0..c {
                let base = ch * h * w;
                let gv = g[(ch * h_out + y) * w_out + xo];
                gx[base + y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                gx[base + y0 * w + x1] += gv * (1.0 - ly) * lx;
                gx[base + y1 * w + x0] += gv * ly * (1.0 - lx);
                gx[base + y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("shape")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm of `[R, D]`; returns output and per-row inverse std.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    x.expect_rank("layer_norm", 2)?;
    let (r, d) = (x.shape()[0], x.shape()[1]);
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("gamma/beta of length {}/{} for width {d}", gamma.len(), beta.len()),
        ));
    }
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0; r * d];
    let mut rstd = vec![0.0; r];
    for i in 0..r {
        let row = &xd[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * rs * gd[j] + bd[j];
        }
    }
    Ok((Tensor::new(vec![r, d], out)?, rstd))
}

pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    rstd: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (r, d) = (x.shape()[0], x.shape()[1]);
    let (xd, gd, go) = (x.data(), gamma.data(), grad_out.data());
    let mut gx = vec![0.0; r * d];
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    for i in 0..r {
        let row = &xd[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let rs = rstd[i];
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for j in 0..d {
            let xhat = (row[j] - mean) * rs;
            let gy = go[i * d + j];
            ggamma[j] += gy * xhat;
            gbeta[j] += gy;
            let g = gy * gd[j];
            sum_g += g;
            sum_g_xhat += g * xhat;
        }
        for j in 0..d {
            let xhat = (row[j] - mean) * rs;
            let g = go[i * d + j] * gd[j];
            gx[i * d + j] = rs * (g - sum_g / d as f64 - xhat * sum_g_xhat / d as f64);
        }
    }
    (
        Tensor::new(vec![r, d], gx).expect("shape"),
        Tensor::new(gamma.shape().to_vec(), ggamma).expect("shape"),
        Tensor::new(gamma.shape().to_vec(), gbeta).expect("shape"),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each flat index of `to` onto the flat index of `from` when `from`
/// is broadcast (extent-1 axes repeated) to `to`.
pub(crate) fn broadcast_index_map(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() != to.len()
        || from
            .iter()
            .zip(to)
            .any(|(&f, &t)| f != t && f != 1)
    {
        return Err(shape_err(
            "broadcast",
            format!("cannot broadcast {from:?} to {to:?}"),
        ));
    }
    let from_strides = strides(from);
    let to_strides = strides(to);
    let numel: usize = to.iter().product();
    let mut map = Vec::with_capacity(numel);
    for flat in 0..numel {
        let mut src = 0;
        for ax in 0..to.len() {
            let i = (flat / to_strides[ax]) % to[ax];
            if from[ax] != 1 {
                src += i * from_strides[ax];
            }
        }
        map.push(src);
    }
    Ok(map)
}
