//! Convolution, transposed convolution and pooling kernels.
//!
//! Convolutions lower to GEMM through `im2col`: each image becomes a
//! `(C·k·k) × (Ho·Wo)` column matrix and the kernel a `C_out × (C·k·k)`
//! matrix. The transposed convolution is the exact adjoint of that lowering
//! (`col2im` after a transposed product), so the two share every index
//! computation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride, dilation and zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry {
        stride: 1,
        dilation: 1,
        padding: 0,
    };

    /// Stride-1 geometry that keeps spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn extent(&self, kernel: usize) -> usize {
        (kernel - 1) * self.dilation + 1
    }

    /// Output length of a convolution along one axis, if non-empty.
    pub fn conv_out(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        let extent = self.extent(kernel);
        (padded >= extent && self.stride > 0).then(|| (padded - extent) / self.stride + 1)
    }

    /// Output length of the transposed convolution along one axis.
    pub fn transpose_out(&self, input: usize, kernel: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.extent(kernel)).checked_sub(2 * self.padding)
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `m×k`
/// and `b` logically `k×n`. `*_t` means the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index dgemm touches for the
    // given dims and row/column strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial bookkeeping shared by `im2col` and `col2im`.
#[derive(Debug, Clone, Copy)]
struct Patch {
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    geom: ConvGeometry,
    out_h: usize,
    out_w: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source column for output column `o` at kernel tap `kj`, if in bounds.
    #[inline]
    fn source(&self, o: usize, kj: usize, len: usize) -> Option<usize> {
        let pos = (o * self.geom.stride + kj * self.geom.dilation).checked_sub(self.geom.padding)?;
        (pos < len).then_some(pos)
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside a row of
    /// length `len`, for stride 1. Source column is `o + offset`.
    #[inline]
    fn unit_stride_span(&self, kj: usize, len: usize, out: usize) -> (usize, usize, isize) {
        let offset = (kj * self.geom.dilation) as isize - self.geom.padding as isize;
        let lo = (-offset).max(0) as usize;
        let hi = ((len as isize - offset).max(0) as usize).min(out);
        (lo.min(hi), hi, offset)
    }

    fn im2col(&self, src: &[f64], col: &mut [f64]) {
        let k = self.kernel;
        let cols = self.cols();
        let unit = self.geom.stride == 1;
        for c in 0..self.channels {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (lo, hi, offset) = self.unit_stride_span(kj, self.w, self.out_w);
                    for oh in 0..self.out_h {
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        let Some(ih) = self.source(oh, ki, self.h) else {
                            line.fill(0.0);
                            continue;
                        };
                        let srow = &plane[ih * self.w..(ih + 1) * self.w];
                        if unit {
                            line[..lo].fill(0.0);
                            line[hi..].fill(0.0);
                            if lo < hi {
                                let s0 = (lo as isize + offset) as usize;
                                line[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                            }
                        } else {
                            for (ow, v) in line.iter_mut().enumerate() {
                                *v = match self.source(ow, kj, self.w) {
                                    Some(iw) => srow[iw],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], dst: &mut [f64]) {
        let k = self.kernel;
        let cols = self.cols();
        let unit = self.geom.stride == 1;
        for c in 0..self.channels {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    let (lo, hi, offset) = self.unit_stride_span(kj, self.w, self.out_w);
                    for oh in 0..self.out_h {
                        let Some(ih) = self.source(oh, ki, self.h) else {
                            continue;
                        };
                        let line = &src[oh * self.out_w..(oh + 1) * self.out_w];
                        let drow = &mut plane[ih * self.w..(ih + 1) * self.w];
                        if unit {
                            if lo < hi {
                                let s0 = (lo as isize + offset) as usize;
                                for (d, v) in drow[s0..s0 + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                    *d += v;
                                }
                            }
                        } else {
                            for (ow, v) in line.iter().enumerate() {
                                if let Some(iw) = self.source(ow, kj, self.w) {
                                    drow[iw] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// 1×1, stride 1, no padding: the column matrix is the image itself.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

fn check_square_kernel(op: &'static str, weight: &Tensor) -> Result<[usize; 4]> {
    let [a, b, kh, kw] = weight.dims4(op)?;
    if kh != kw || kh == 0 {
        return Err(Error::shape(op, format!("kernel must be square, got {kh}x{kw}")));
    }
    Ok([a, b, kh, kw])
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias has {} entries for {channels} output channels", b.len()),
        )),
        _ => Ok(()),
    }
}

fn conv_patch(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<(Patch, usize, usize)> {
    const OP: &str = "conv2d";
    let [n, c, h, w] = input.dims4(OP)?;
    let [c_out, c_in, k, _] = check_square_kernel(OP, weight)?;
    if c != c_in {
        return Err(Error::shape(
            OP,
            format!("input has {c} channels, kernel expects {c_in}"),
        ));
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::shape(OP, "stride and dilation must be positive"));
    }
    let (Some(out_h), Some(out_w)) = (geom.conv_out(h, k), geom.conv_out(w, k)) else {
        return Err(Error::ZeroSizeOutput {
            op: OP,
            detail: format!(
                "effective kernel extent {} exceeds padded input {}x{}",
                geom.extent(k),
                h + 2 * geom.padding,
                w + 2 * geom.padding
            ),
        });
    };
    let patch = Patch {
        channels: c,
        h,
        w,
        kernel: k,
        geom,
        out_h,
        out_w,
    };
    Ok((patch, n, c_out))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Result<Tensor> {
    let (patch, n, c_out) = conv_patch(input, weight, geom)?;
    check_bias("conv2d", bias, c_out)?;
    let (rows, cols) = (patch.rows(), patch.cols());
    let in_len = patch.channels * patch.h * patch.w;
    let mut out = vec![0.0; n * c_out * cols];
    let mut col = if patch.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
    for (img, dst) in input.data().chunks_exact(in_len).zip(out.chunks_exact_mut(c_out * cols)) {
        let cm: &[f64] = if patch.is_pointwise() {
            img
        } else {
            patch.im2col(img, &mut col);
            &col
        };
        gemm(c_out, rows, cols, weight.data(), false, cm, false, dst, false);
        if let Some(b) = bias {
            for (plane, &bv) in dst.chunks_exact_mut(cols).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new([n, c_out, patch.out_h, patch.out_w], out)
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    grad_out: &[f64],
    need_input: bool,
) -> Result<ConvGrads> {
    let (patch, n, c_out) = conv_patch(input, weight, geom)?;
    let (rows, cols) = (patch.rows(), patch.cols());
    let in_len = patch.channels * patch.h * patch.w;
    let mut grads = ConvGrads {
        input: need_input.then(|| vec![0.0; input.len()]),
        weight: vec![0.0; weight.len()],
        bias: vec![0.0; c_out],
    };
    let pointwise = patch.is_pointwise();
    let mut col = vec![0.0; if pointwise { 0 } else { rows * cols }];
    let mut dcol = vec![0.0; if need_input && !pointwise { rows * cols } else { 0 }];
    for (i, go) in grad_out.chunks_exact(c_out * cols).enumerate().take(n) {
        let img = &input.data()[i * in_len..(i + 1) * in_len];
        let cm: &[f64] = if pointwise {
            img
        } else {
            patch.im2col(img, &mut col);
            &col
        };
        // dW += dOut · colᵀ
        gemm(c_out, cols, rows, go, false, cm, true, &mut grads.weight, true);
        for (b, plane) in grads.bias.iter_mut().zip(go.chunks_exact(cols)) {
            *b += plane.iter().sum::<f64>();
        }
        if let Some(gi) = grads.input.as_mut() {
            let dst = &mut gi[i * in_len..(i + 1) * in_len];
            if pointwise {
                gemm(rows, c_out, cols, weight.data(), true, go, false, dst, true);
            } else {
                gemm(rows, c_out, cols, weight.data(), true, go, false, &mut dcol, false);
                patch.col2im_add(&dcol, dst);
            }
        }
    }
    Ok(grads)
}

fn transpose_patch(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<(Patch, usize, usize)> {
    const OP: &str = "conv_transpose2d";
    let [n, a, h, w] = input.dims4(OP)?;
    let [wa, b, k, _] = check_square_kernel(OP, weight)?;
    if a != wa {
        return Err(Error::shape(
            OP,
            format!("input has {a} channels, kernel expects {wa}"),
        ));
    }
    if geom.stride == 0 || geom.dilation == 0 || h == 0 || w == 0 {
        return Err(Error::shape(OP, "stride, dilation and input dims must be positive"));
    }
    let (Some(out_h), Some(out_w)) = (geom.transpose_out(h, k), geom.transpose_out(w, k)) else {
        return Err(Error::ZeroSizeOutput {
            op: OP,
            detail: format!("padding {} too large", geom.padding),
        });
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::ZeroSizeOutput {
            op: OP,
            detail: format!("{out_h}x{out_w}"),
        });
    }
    // Viewed from the output side this is a convolution producing `h × w`.
    let patch = Patch {
        channels: b,
        h: out_h,
        w: out_w,
        kernel: k,
        geom,
        out_h: h,
        out_w: w,
    };
    Ok((patch, n, a))
}

/// Transposed convolution with kernel layout `(C_in, C_out, k, k)`.
///
/// With the same kernel and zero bias this is the adjoint of [`conv2d`]
/// applied with layout `(C_out_conv, C_in_conv, k, k)`.
pub fn conv_transpose2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Result<Tensor> {
    let (patch, n, a) = transpose_patch(input, weight, geom)?;
    check_bias("conv_transpose2d", bias, patch.channels)?;
    let (rows, cols) = (patch.rows(), patch.cols());
    let out_plane = patch.h * patch.w;
    let out_len = patch.channels * out_plane;
    let mut out = vec![0.0; n * out_len];
    let mut col = vec![0.0; rows * cols];
    for (img, dst) in input.data().chunks_exact(a * cols).zip(out.chunks_exact_mut(out_len)) {
        // col = Wᵀ · x, W viewed as a × rows
        gemm(rows, a, cols, weight.data(), true, img, false, &mut col, false);
        patch.col2im_add(&col, dst);
        if let Some(b) = bias {
            for (plane, &bv) in dst.chunks_exact_mut(out_plane).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new([n, patch.channels, patch.h, patch.w], out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    grad_out: &[f64],
    need_input: bool,
) -> Result<ConvGrads> {
    let (patch, n, a) = transpose_patch(input, weight, geom)?;
    let (rows, cols) = (patch.rows(), patch.cols());
    let out_len = patch.channels * patch.h * patch.w;
    let mut grads = ConvGrads {
        input: need_input.then(|| vec![0.0; input.len()]),
        weight: vec![0.0; weight.len()],
        bias: vec![0.0; patch.channels],
    };
    let out_plane = patch.h * patch.w;
    let mut col = vec![0.0; rows * cols];
    for (i, go) in grad_out.chunks_exact(out_len).enumerate().take(n) {
        let img = &input.data()[i * a * cols..(i + 1) * a * cols];
        patch.im2col(go, &mut col);
        // dW (a × rows) += x (a × cols) · colᵀ
        gemm(a, cols, rows, img, false, &col, true, &mut grads.weight, true);
        for (b, plane) in grads.bias.iter_mut().zip(go.chunks_exact(out_plane)) {
            *b += plane.iter().sum::<f64>();
        }
        if let Some(gi) = grads.input.as_mut() {
            let dst = &mut gi[i * a * cols..(i + 1) * a * cols];
            gemm(a, rows, cols, weight.data(), false, &col, false, dst, true);
        }
    }
    Ok(grads)
}

/// Non-overlapping max pooling. Returns the pooled tensor and, per output
/// element, the flat input index it was taken from. Ties resolve to the
/// first element of the window in row-major order.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    let [n, c, h, w] = input.dims4(OP)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Indivisible { op: OP, h, w, by: window });
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * window * w + j * window;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (i * window + di) * w + j * window + dj;
                        if src[idx] > src[best] || (src[idx].is_nan() && !src[best].is_nan()) {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}
