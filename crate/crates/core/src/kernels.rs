//! Numeric kernels: GEMM, the three convolution flavours used by the
//! networks, and multiply-accumulate accounting.
//!
//! Every kernel accumulates each output element in a single fixed order, so
//! results do not depend on the thread count or on column tiling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Element, Shape4, Tensor};

/// Columns processed per GEMM tile; keeps a tile of the right operand in L2.
const GEMM_COL_TILE: usize = 512;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

/// Dense product `a x b`.
pub fn gemm<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "gemm inner dimensions disagree: lhs is {}x{}, rhs is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, p) = (a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, p);
    if p == 0 {
        return Ok(out);
    }
    parallel::for_each_chunk(&mut out.data, p, |row, out_row| {
        gemm_acc(&a.data[row * m..(row + 1) * m], &b.data, out_row, 1, m, p);
    });
    Ok(out)
}

/// `out[d x p] += a[d x m] * b[m x p]`, sequential.
///
/// Each output element sums its `m` products in index order starting from
/// the value already in `out`, which is what a triple loop does.
pub fn gemm_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], d: usize, m: usize, p: usize) {
    debug_assert_eq!(a.len(), d * m);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), d * p);
    let mut j0 = 0;
    while j0 < p {
        let j1 = (j0 + GEMM_COL_TILE).min(p);
        for row in 0..d {
            let out_row = &mut out[row * p + j0..row * p + j1];
            let a_row = &a[row * m..(row + 1) * m];
            for (k, &coef) in a_row.iter().enumerate() {
                let b_row = &b[k * p + j0..k * p + j1];
                for (o, &v) in out_row.iter_mut().zip(b_row) {
                    *o = *o + coef * v;
                }
            }
        }
        j0 = j1;
    }
}

/// `out[m x p] += a^T * b` where `a` is `d x m` and `b` is `d x p`.
pub fn gemm_tn_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], d: usize, m: usize, p: usize) {
    debug_assert_eq!(a.len(), d * m);
    debug_assert_eq!(b.len(), d * p);
    debug_assert_eq!(out.len(), m * p);
    let mut j0 = 0;
    while j0 < p {
        let j1 = (j0 + GEMM_COL_TILE).min(p);
        for k in 0..m {
            let out_row = &mut out[k * p + j0..k * p + j1];
            for row in 0..d {
                let coef = a[row * m + k];
                let b_row = &b[row * p + j0..row * p + j1];
                for (o, &v) in out_row.iter_mut().zip(b_row) {
                    *o = *o + coef * v;
                }
            }
        }
        j0 = j1;
    }
}

/// `out[d x m] += a * b^T` where `a` is `d x p` and `b` is `m x p`.
pub fn gemm_nt_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], d: usize, m: usize, p: usize) {
    debug_assert_eq!(a.len(), d * p);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), d * m);
    for row in 0..d {
        let a_row = &a[row * p..(row + 1) * p];
        for k in 0..m {
            let b_row = &b[k * p..(k + 1) * p];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[row * m + k] = out[row * m + k] + acc;
        }
    }
}

/// Kernel geometry of a (square) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Number of kernel taps, e.g. 9 for 3x3.
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding on each side.
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "convolution sizes must be positive (D={out_channels}, C={in_channels}, K={kernel}, stride={stride})"
            )));
        }
        let side = integer_sqrt(kernel);
        if side * side != kernel {
            return Err(Error::Config(format!(
                "kernel size K={kernel} is not a perfect square"
            )));
        }
        Ok(ConvSpec {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// 3x3 convolution with "same" padding.
    pub fn same3x3(out_channels: usize, in_channels: usize, stride: usize) -> Result<Self> {
        Self::new(out_channels, in_channels, 9, stride, 1)
    }

    pub fn side(&self) -> usize {
        integer_sqrt(self.kernel)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let side = self.side();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < side || pw < side {
            return Err(Error::shape(format!(
                "{h}x{w} input with padding {} is smaller than a {side}x{side} kernel",
                self.padding
            )));
        }
        Ok(((ph - side) / self.stride + 1, (pw - side) / self.stride + 1))
    }

    /// Displacement of every kernel tap relative to the output position,
    /// top-left to bottom-right.
    pub fn offsets(&self) -> Vec<KernelOffset> {
        let side = self.side();
        (0..self.kernel)
            .map(|k| KernelOffset {
                k,
                di: (k / side) as isize - self.padding as isize,
                dj: (k % side) as isize - self.padding as isize,
            })
            .collect()
    }

    pub fn weight_shape(&self) -> Shape4 {
        let side = self.side();
        Shape4::new(self.out_channels, self.in_channels, side, side)
    }
}

fn integer_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Tap `k` reads the input at `(m + di, n + dj)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelOffset {
    /// Zero-based tap index.
    pub k: usize,
    pub di: isize,
    pub dj: isize,
}

impl KernelOffset {
    pub const fn new(k: usize, di: isize, dj: isize) -> Self {
        KernelOffset { k, di, dj }
    }

    /// The nine taps of a centred 3x3 kernel.
    pub fn grid3x3() -> [KernelOffset; 9] {
        std::array::from_fn(|k| KernelOffset::new(k, k as isize / 3 - 1, k as isize % 3 - 1))
    }
}

fn check_conv_input<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    if x.shape().c != spec.in_channels {
        return Err(Error::shape(format!(
            "convolution expects {} input channels, input has shape {}",
            spec.in_channels,
            x.shape()
        )));
    }
    weight.expect_shape(spec.weight_shape(), "convolution weight")
}

/// Direct evaluation of a zero-padded convolution. `weight` is `(D, C, side, side)`.
pub fn conv_naive<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    check_conv_input(x, weight, spec)?;
    let xs = x.shape();
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let out_shape = Shape4::new(xs.n, spec.out_channels, oh, ow);
    let side = spec.side();
    let (stride, pad) = (spec.stride as isize, spec.padding as isize);
    let wd = weight.data();
    let mut out = vec![T::zero(); out_shape.len()];
    parallel::for_each_chunk(&mut out, oh * ow, |plane, y| {
        let (n, d) = (plane / spec.out_channels, plane % spec.out_channels);
        for m in 0..oh {
            for p in 0..ow {
                let mut acc = T::zero();
                for c in 0..spec.in_channels {
                    for ki in 0..side {
                        for kj in 0..side {
                            let ih = m as isize * stride + ki as isize - pad;
                            let iw = p as isize * stride + kj as isize - pad;
                            let wv = wd[((d * spec.in_channels + c) * side + ki) * side + kj];
                            acc = acc + wv * x.at_padded(n, c, ih, iw);
                        }
                    }
                }
                y[m * ow + p] = acc;
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv_naive`] with respect to its input and weight.
pub fn conv_naive_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_conv_input(x, weight, spec)?;
    let xs = x.shape();
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    grad_out.expect_shape(Shape4::new(xs.n, spec.out_channels, oh, ow), "convolution gradient")?;
    let side = spec.side();
    let (stride, pad) = (spec.stride, spec.padding as isize);
    let (c_in, d_out) = (spec.in_channels, spec.out_channels);
    let wd = weight.data();
    let gy = grad_out.data();

    let mut gx = vec![T::zero(); xs.len()];
    parallel::for_each_chunk(&mut gx, xs.plane(), |plane, gplane| {
        let (n, c) = (plane / c_in, plane % c_in);
        for d in 0..d_out {
            let gy_plane = &gy[(n * d_out + d) * oh * ow..(n * d_out + d + 1) * oh * ow];
            for ki in 0..side {
                for kj in 0..side {
                    let wv = wd[((d * c_in + c) * side + ki) * side + kj];
                    for m in 0..oh {
                        let ih = (m * stride) as isize + ki as isize - pad;
                        if ih < 0 || ih as usize >= xs.h {
                            continue;
                        }
                        for p in 0..ow {
                            let iw = (p * stride) as isize + kj as isize - pad;
                            if iw < 0 || iw as usize >= xs.w {
                                continue;
                            }
                            let idx = ih as usize * xs.w + iw as usize;
                            gplane[idx] = gplane[idx] + wv * gy_plane[m * ow + p];
                        }
                    }
                }
            }
        }
    });

    let per_filter = c_in * side * side;
    let mut gw = vec![T::zero(); d_out * per_filter];
    parallel::for_each_chunk(&mut gw, per_filter, |d, gfilter| {
        for n in 0..xs.n {
            let gy_plane = &gy[(n * d_out + d) * oh * ow..(n * d_out + d + 1) * oh * ow];
            for c in 0..c_in {
                for ki in 0..side {
                    for kj in 0..side {
                        let mut acc = T::zero();
                        for m in 0..oh {
                            for p in 0..ow {
                                let ih = (m * stride) as isize + ki as isize - pad;
                                let iw = (p * stride) as isize + kj as isize - pad;
                                acc = acc + gy_plane[m * ow + p] * x.at_padded(n, c, ih, iw);
                            }
                        }
                        let idx = (c * side + ki) * side + kj;
                        gfilter[idx] = gfilter[idx] + acc;
                    }
                }
            }
        }
    });

    Ok((
        Tensor::from_vec(xs, gx)?,
        Tensor::from_vec(spec.weight_shape(), gw)?,
    ))
}

fn strided_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// Copies every `stride`-th row and column of one example into a C x (H'*W') block.
fn subsample_example<T: Element>(x: &Tensor<T>, n: usize, stride: usize, out: &mut [T]) {
    let s = x.shape();
    let (oh, ow) = strided_hw(s.h, s.w, stride);
    for c in 0..s.c {
        let plane = x.plane(n, c);
        for m in 0..oh {
            for p in 0..ow {
                out[(c * oh + m) * ow + p] = plane[m * stride * s.w + p * stride];
            }
        }
    }
}

/// 1x1 convolution as one GEMM per example: `Y[n] = W x X[n]` with `X[n]`
/// flattened to C x (H*W). `weight` is D x C.
pub fn conv_pointwise<T: Element>(x: &Tensor<T>, weight: &Matrix<T>, stride: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if weight.cols() != xs.c {
        return Err(Error::shape(format!(
            "pointwise weight is {}x{} but input has shape {xs}",
            weight.rows(),
            weight.cols()
        )));
    }
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let (oh, ow) = strided_hw(xs.h, xs.w, stride);
    let d = weight.rows();
    let out_shape = Shape4::new(xs.n, d, oh, ow);
    let mut out = vec![T::zero(); out_shape.len()];
    parallel::for_each_chunk(&mut out, d * oh * ow, |n, y| {
        if stride == 1 {
            gemm_acc(weight.data(), x.example(n), y, d, xs.c, oh * ow);
        } else {
            let mut sub = vec![T::zero(); xs.c * oh * ow];
            subsample_example(x, n, stride, &mut sub);
            gemm_acc(weight.data(), &sub, y, d, xs.c, oh * ow);
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv_pointwise`]: `(grad_x, grad_w)`.
pub fn conv_pointwise_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Matrix<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Matrix<T>)> {
    let xs = x.shape();
    let (oh, ow) = strided_hw(xs.h, xs.w, stride);
    let d = weight.rows();
    grad_out.expect_shape(Shape4::new(xs.n, d, oh, ow), "pointwise gradient")?;
    let c = xs.c;
    let plane = oh * ow;

    let mut gx = vec![T::zero(); xs.len()];
    parallel::for_each_chunk(&mut gx, xs.example(), |n, gxe| {
        let gy = grad_out.example(n);
        if stride == 1 {
            gemm_tn_acc(weight.data(), gy, gxe, d, c, plane);
        } else {
            let mut sub = vec![T::zero(); c * plane];
            gemm_tn_acc(weight.data(), gy, &mut sub, d, c, plane);
            for ch in 0..c {
                for m in 0..oh {
                    for p in 0..ow {
                        gxe[(ch * xs.h + m * stride) * xs.w + p * stride] = sub[(ch * oh + m) * ow + p];
                    }
                }
            }
        }
    });

    // Per-example partials summed in batch order keep the result independent
    // of scheduling.
    let partials = parallel::map_range(xs.n, |n| {
        let mut gw = vec![T::zero(); d * c];
        if stride == 1 {
            gemm_nt_acc(grad_out.example(n), x.example(n), &mut gw, d, c, plane);
        } else {
            let mut sub = vec![T::zero(); c * plane];
            subsample_example(x, n, stride, &mut sub);
            gemm_nt_acc(grad_out.example(n), &sub, &mut gw, d, c, plane);
        }
        gw
    });
    let mut gw = vec![T::zero(); d * c];
    for part in partials {
        for (g, v) in gw.iter_mut().zip(part) {
            *g = *g + v;
        }
    }
    Ok((Tensor::from_vec(xs, gx)?, Matrix::from_vec(d, c, gw)?))
}

/// Per-channel spatial convolution. `weight` is `(C, 1, side, side)`.
pub fn conv_depthwise<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.n != xs.c || ws.c != 1 || ws.h != ws.w {
        return Err(Error::shape(format!(
            "depthwise weight {ws} does not fit input {xs}"
        )));
    }
    let spec = ConvSpec::new(xs.c, xs.c, ws.h * ws.w, stride, padding)?;
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let side = ws.h;
    let out_shape = Shape4::new(xs.n, xs.c, oh, ow);
    let (s, pad) = (stride as isize, padding as isize);
    let mut out = vec![T::zero(); out_shape.len()];
    parallel::for_each_chunk(&mut out, oh * ow, |plane, y| {
        let (n, c) = (plane / xs.c, plane % xs.c);
        let kern = &weight.data()[c * side * side..(c + 1) * side * side];
        for m in 0..oh {
            for p in 0..ow {
                let mut acc = T::zero();
                for ki in 0..side {
                    for kj in 0..side {
                        let ih = m as isize * s + ki as isize - pad;
                        let iw = p as isize * s + kj as isize - pad;
                        acc = acc + kern[ki * side + kj] * x.at_padded(n, c, ih, iw);
                    }
                }
                y[m * ow + p] = acc;
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv_depthwise`]: `(grad_x, grad_w)`.
pub fn conv_depthwise_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let ws = weight.shape();
    let side = ws.h;
    let spec = ConvSpec::new(xs.c, xs.c, side * side, stride, padding)?;
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    grad_out.expect_shape(Shape4::new(xs.n, xs.c, oh, ow), "depthwise gradient")?;
    let pad = padding as isize;
    let gy = grad_out.data();

    let mut gx = vec![T::zero(); xs.len()];
    parallel::for_each_chunk(&mut gx, xs.plane(), |plane, gplane| {
        let c = plane % xs.c;
        let kern = &weight.data()[c * side * side..(c + 1) * side * side];
        let gy_plane = &gy[plane * oh * ow..(plane + 1) * oh * ow];
        for ki in 0..side {
            for kj in 0..side {
                let wv = kern[ki * side + kj];
                for m in 0..oh {
                    let ih = (m * stride) as isize + ki as isize - pad;
                    if ih < 0 || ih as usize >= xs.h {
                        continue;
                    }
                    for p in 0..ow {
                        let iw = (p * stride) as isize + kj as isize - pad;
                        if iw < 0 || iw as usize >= xs.w {
                            continue;
                        }
                        let idx = ih as usize * xs.w + iw as usize;
                        gplane[idx] = gplane[idx] + wv * gy_plane[m * ow + p];
                    }
                }
            }
        }
    });

    let mut gw = vec![T::zero(); ws.len()];
    parallel::for_each_chunk(&mut gw, side * side, |c, gk| {
        for n in 0..xs.n {
            let gy_plane = &gy[(n * xs.c + c) * oh * ow..(n * xs.c + c + 1) * oh * ow];
            for ki in 0..side {
                for kj in 0..side {
                    let mut acc = T::zero();
                    for m in 0..oh {
                        for p in 0..ow {
                            let ih = (m * stride) as isize + ki as isize - pad;
                            let iw = (p * stride) as isize + kj as isize - pad;
                            acc = acc + gy_plane[m * ow + p] * x.at_padded(n, c, ih, iw);
                        }
                    }
                    gk[ki * side + kj] = gk[ki * side + kj] + acc;
                }
            }
        }
    });
    Ok((Tensor::from_vec(xs, gx)?, Tensor::from_vec(ws, gw)?))
}

/// What [`count_flops`] needs to know about a layer. Spatial sizes are the
/// output's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopsDesc {
    /// Dense convolution with `kernel` taps (1 for pointwise).
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        out_h: usize,
        out_w: usize,
    },
    /// Depthwise convolution: one filter per channel.
    Depthwise {
        channels: usize,
        kernel: usize,
        out_h: usize,
        out_w: usize,
    },
    /// Element-wise work such as BN, ReLU, sums or interpolation.
    Elementwise {
        channels: usize,
        h: usize,
        w: usize,
        ops_per_element: usize,
    },
}

/// Multiply-accumulate count, `(D x C x K) x (W x H)`; reported as "FLOPs".
pub fn count_flops(desc: &FlopsDesc) -> u64 {
    match *desc {
        FlopsDesc::Conv {
            out_channels,
            in_channels,
            kernel,
            out_h,
            out_w,
        } => (out_channels * in_channels * kernel) as u64 * (out_h * out_w) as u64,
        FlopsDesc::Depthwise {
            channels,
            kernel,
            out_h,
            out_w,
        } => (channels * kernel) as u64 * (out_h * out_w) as u64,
        FlopsDesc::Elementwise {
            channels,
            h,
            w,
            ops_per_element,
        } => (channels * h * w * ops_per_element) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor<T: Element>(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor<T> {
        Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
    }

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn gemm_identity_is_bitwise() {
        let b = Matrix::from_vec(3, 2, vec![1.5f32, -2.0, 0.1, 7.25, 3.0, -0.3]).unwrap();
        let out = gemm(&Matrix::identity(3), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn gemm_scalar() {
        let a = Matrix::from_vec(1, 1, vec![2.0f64]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0f64]).unwrap();
        assert_eq!(gemm(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn gemm_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(gemm(&a, &b).unwrap().data(), triple_loop(&a, &b).as_slice());
    }

    #[test]
    fn gemm_tiling_does_not_change_bits() {
        // Wider than one column tile.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = GEMM_COL_TILE * 2 + 7;
        let a = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(4, p, (0..4 * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(gemm(&a, &b).unwrap().data(), triple_loop(&a, &b).as_slice());
    }

    #[test]
    fn gemm_shape_error_names_both_operands() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(4, 5);
        let msg = gemm(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("2x3") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn transposed_gemms_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (d, m, p) = (3, 4, 6);
        let a: Vec<f64> = (0..d * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tn = vec![0.0; m * p];
        gemm_tn_acc(&a, &b, &mut tn, d, m, p);
        for k in 0..m {
            for j in 0..p {
                let expect: f64 = (0..d).map(|r| a[r * m + k] * b[r * p + j]).sum();
                assert!((tn[k * p + j] - expect).abs() < 1e-12);
            }
        }
        let c: Vec<f64> = (0..m * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut nt = vec![0.0; d * m];
        gemm_nt_acc(&b, &c, &mut nt, d, m, p);
        for r in 0..d {
            for k in 0..m {
                let expect: f64 = (0..p).map(|j| b[r * p + j] * c[k * p + j]).sum();
                assert!((nt[r * m + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_spec_rejects_non_square_kernel() {
        assert!(ConvSpec::new(1, 1, 8, 1, 0).is_err());
        assert!(ConvSpec::new(1, 1, 9, 1, 1).is_ok());
    }

    #[test]
    fn grid3x3_order() {
        let g = KernelOffset::grid3x3();
        assert_eq!((g[0].di, g[0].dj), (-1, -1));
        assert_eq!((g[1].di, g[1].dj), (-1, 0));
        assert_eq!((g[4].di, g[4].dj), (0, 0));
        assert_eq!((g[8].di, g[8].dj), (1, 1));
        let from_spec = ConvSpec::same3x3(1, 1, 1).unwrap().offsets();
        assert_eq!(from_spec.as_slice(), g.as_slice());
    }

    #[test]
    fn naive_identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f32> = random_tensor(Shape4::new(2, 3, 4, 5), &mut rng);
        let spec = ConvSpec::new(3, 3, 1, 1, 0).unwrap();
        let w = Tensor::from_fn(spec.weight_shape(), |d, c, _, _| if d == c { 1.0 } else { 0.0 });
        assert_eq!(conv_naive(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn naive_zero_input() {
        let spec = ConvSpec::same3x3(4, 2, 1).unwrap();
        let w = Tensor::full(spec.weight_shape(), 0.7f32);
        let y = conv_naive(&Tensor::zeros(Shape4::new(1, 2, 5, 5)), &w, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_channel_mismatch() {
        let spec = ConvSpec::same3x3(4, 2, 1).unwrap();
        let w = Tensor::<f32>::zeros(spec.weight_shape());
        let err = conv_naive(&Tensor::zeros(Shape4::new(1, 3, 5, 5)), &w, &spec).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn naive_output_geometry() {
        let spec = ConvSpec::same3x3(2, 1, 2).unwrap();
        assert_eq!(spec.output_hw(224, 224).unwrap(), (112, 112));
        assert_eq!(spec.output_hw(7, 7).unwrap(), (4, 4));
        let spec = ConvSpec::new(2, 1, 9, 1, 0).unwrap();
        assert_eq!(spec.output_hw(5, 5).unwrap(), (3, 3));
    }

    #[test]
    fn pointwise_identity_and_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f32> = random_tensor(Shape4::new(2, 4, 3, 3), &mut rng);
        assert_eq!(conv_pointwise(&x, &Matrix::identity(4), 1).unwrap(), x);

        let ones = Matrix::from_vec(1, 4, vec![1.0; 4]).unwrap();
        let y = conv_pointwise(&x, &ones, 1).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let mut s = 0.0;
                    for c in 0..4 {
                        s += x.at(n, c, h, w);
                    }
                    assert_eq!(y.at(n, 0, h, w), s);
                }
            }
        }
    }

    #[test]
    fn pointwise_matches_naive_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let x: Tensor<f32> = random_tensor(Shape4::new(2, 5, 7, 6), &mut rng);
            let wm = Matrix::from_vec(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let spec = ConvSpec::new(3, 5, 1, stride, 0).unwrap();
            let wt = Tensor::from_vec(spec.weight_shape(), wm.data().to_vec()).unwrap();
            let a = conv_pointwise(&x, &wm, stride).unwrap();
            let b = conv_naive(&x, &wt, &spec).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }
    }

    #[test]
    fn pointwise_shape_mismatch() {
        let x = Tensor::<f32>::zeros(Shape4::new(1, 3, 2, 2));
        assert!(conv_pointwise(&x, &Matrix::zeros(2, 4), 1).is_err());
    }

    #[test]
    fn depthwise_equals_grouped_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = random_tensor(Shape4::new(2, 3, 6, 5), &mut rng);
        let w: Tensor<f64> = random_tensor(Shape4::new(3, 1, 3, 3), &mut rng);
        for stride in [1, 2] {
            let y = conv_depthwise(&x, &w, stride, 1).unwrap();
            // Dense conv with a block-diagonal weight.
            let spec = ConvSpec::same3x3(3, 3, stride).unwrap();
            let dense = Tensor::from_fn(spec.weight_shape(), |d, c, i, j| if d == c { w.at(d, 0, i, j) } else { 0.0 });
            let r = conv_naive(&x, &dense, &spec).unwrap();
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
        }
    }

    #[test]
    fn flops_table_one() {
        let pw = FlopsDesc::Conv { out_channels: 64, in_channels: 64, kernel: 1, out_h: 224, out_w: 224 };
        assert_eq!(count_flops(&pw), 205_520_896);
        let dw = FlopsDesc::Depthwise { channels: 64, kernel: 9, out_h: 224, out_w: 224 };
        assert_eq!(count_flops(&dw), 28_901_376);
        let unit = FlopsDesc::Conv { out_channels: 1, in_channels: 1, kernel: 1, out_h: 1, out_w: 1 };
        assert_eq!(count_flops(&unit), 1);
    }

    #[test]
    fn flops_linear_in_each_factor() {
        let base = (3usize, 5usize, 9usize, 4usize, 6usize);
        let f = |d: usize, c: usize, k: usize, h: usize, w: usize| {
            count_flops(&FlopsDesc::Conv { out_channels: d, in_channels: c, kernel: k, out_h: h, out_w: w })
        };
        let (d, c, k, h, w) = base;
        let b = f(d, c, k, h, w);
        assert_eq!(f(2 * d, c, k, h, w), 2 * b);
        assert_eq!(f(d, 2 * c, k, h, w), 2 * b);
        assert_eq!(f(d, c, 2 * k, h, w), 2 * b);
        assert_eq!(f(d, c, k, 2 * h, w), 2 * b);
    }
}
