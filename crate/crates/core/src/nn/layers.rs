//! Layers of the static training graph.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{
    conv_depthwise, conv_depthwise_backward, conv_naive, conv_naive_backward, conv_pointwise,
    conv_pointwise_backward, count_flops, ConvSpec, FlopsDesc, Matrix,
};
use crate::parallel;
use crate::shift::{asl_backward_with, asl_forward_raw, strided_size, AslCache, InitMode, ShiftParams};
use crate::tensor::{Element, Shape4, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Pointwise,
    Depthwise,
    Shift,
    BatchNorm,
    Relu,
    Add,
    GlobalAvgPool,
    Linear,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Pointwise => "conv1x1",
            LayerKind::Depthwise => "dwconv",
            LayerKind::Shift => "asl",
            LayerKind::BatchNorm => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::GlobalAvgPool => "avgpool",
            LayerKind::Linear => "fc",
        })
    }
}

/// What a parameter is, which decides how the optimizer treats it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Convolution or fully connected weights; weight decay applies.
    Weight,
    Bias,
    BnAffine,
    /// Interleaved `(alpha, beta)` pairs of a shift layer.
    Shift,
}

/// A learnable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub role: ParamRole,
    pub trainable: bool,
}

impl<T: Element> Param<T> {
    pub fn new(name: &str, shape: Vec<usize>, value: Vec<T>, role: ParamRole) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param {name}");
        Param {
            name: name.to_string(),
            grad: vec![T::zero(); value.len()],
            shape,
            value,
            role,
            trainable: true,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    fn accumulate(&mut self, g: &[T]) {
        for (a, &b) in self.grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
}

/// Non-learnable persistent state (BN running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

impl<T: Element> Buffer<T> {
    pub fn new(name: &str, value: Vec<T>) -> Self {
        Buffer {
            name: name.to_string(),
            shape: vec![value.len()],
            value,
        }
    }
}

pub trait Layer<T: Element>: Send {
    fn kind(&self) -> LayerKind;

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4>;

    fn forward(&mut self, inputs: &[&Tensor<T>], mode: Mode) -> Result<Tensor<T>>;

    /// Accumulates parameter gradients and returns one gradient per input.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    fn params(&self) -> &[Param<T>] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut []
    }

    fn buffers(&self) -> &[Buffer<T>] {
        &[]
    }

    fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut []
    }

    /// Multiply-accumulates of one forward pass for the given input shape.
    fn flops(&self, input: Shape4) -> u64;

    fn clear_cache(&mut self);

    /// Initialisation mode, for shift layers only.
    fn shift_init_mode(&self) -> Option<InitMode> {
        None
    }
}

fn single<'a, T>(inputs: &[&'a Tensor<T>], what: &str) -> Result<&'a Tensor<T>> {
    match inputs {
        [x] => Ok(x),
        _ => Err(Error::shape(format!("{what} takes one input, got {}", inputs.len()))),
    }
}

fn single_shape(inputs: &[Shape4], what: &str) -> Result<Shape4> {
    match inputs {
        [s] => Ok(*s),
        _ => Err(Error::shape(format!("{what} takes one input, got {}", inputs.len()))),
    }
}

fn no_cache() -> Error {
    Error::State("backward called before forward".into())
}

/// He-normal initialisation for a layer with `fan_in` inputs.
pub fn he_normal<T: Element>(len: usize, fan_in: usize, rng: &mut impl rand::Rng) -> Vec<T> {
    use rand_distr::{Distribution, StandardNormal};
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect()
}

/// Dense KxK convolution evaluated directly (used for the stem).
pub struct Conv2d<T> {
    spec: ConvSpec,
    params: [Param<T>; 1],
    cache: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    pub fn new(spec: ConvSpec, weight: Vec<T>) -> Self {
        let ws = spec.weight_shape();
        Conv2d {
            spec,
            params: [Param::new("weight", vec![ws.n, ws.c, ws.h, ws.w], weight, ParamRole::Weight)],
            cache: None,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    fn weight(&self) -> Tensor<T> {
        Tensor::from_vec(self.spec.weight_shape(), self.params[0].value.clone()).expect("weight shape")
    }
}

impl<T: Element> Layer<T> for Conv2d<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Conv
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let s = single_shape(inputs, "conv")?;
        if s.c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "expects {} channels, input is {s}",
                self.spec.in_channels
            )));
        }
        let (h, w) = self.spec.output_hw(s.h, s.w)?;
        Ok(Shape4::new(s.n, self.spec.out_channels, h, w))
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "conv")?;
        let y = conv_naive(x, &self.weight(), &self.spec)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or_else(no_cache)?;
        let (gx, gw) = conv_naive_backward(x, &self.weight(), &self.spec, grad_out)?;
        if self.params[0].trainable {
            self.params[0].accumulate(gw.data());
        }
        Ok(vec![gx])
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    fn flops(&self, input: Shape4) -> u64 {
        let (h, w) = self.spec.output_hw(input.h, input.w).unwrap_or((0, 0));
        input.n as u64
            * count_flops(&FlopsDesc::Conv {
                out_channels: self.spec.out_channels,
                in_channels: self.spec.in_channels,
                kernel: self.spec.kernel,
                out_h: h,
                out_w: w,
            })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// 1x1 convolution without bias.
pub struct Pointwise<T> {
    out_channels: usize,
    in_channels: usize,
    stride: usize,
    params: [Param<T>; 1],
    cache: Option<Tensor<T>>,
}

impl<T: Element> Pointwise<T> {
    pub fn new(out_channels: usize, in_channels: usize, stride: usize, weight: Vec<T>) -> Self {
        Pointwise {
            out_channels,
            in_channels,
            stride,
            params: [Param::new(
                "weight",
                vec![out_channels, in_channels],
                weight,
                ParamRole::Weight,
            )],
            cache: None,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn weight(&self) -> Matrix<T> {
        Matrix::from_vec(self.out_channels, self.in_channels, self.params[0].value.clone())
            .expect("weight shape")
    }
}

impl<T: Element> Layer<T> for Pointwise<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Pointwise
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let s = single_shape(inputs, "conv1x1")?;
        if s.c != self.in_channels {
            return Err(Error::shape(format!(
                "expects {} channels, input is {s}",
                self.in_channels
            )));
        }
        let (h, w) = strided_size(s.h, s.w, self.stride);
        Ok(Shape4::new(s.n, self.out_channels, h, w))
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "conv1x1")?;
        let y = conv_pointwise(x, &self.weight(), self.stride)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or_else(no_cache)?;
        let (gx, gw) = conv_pointwise_backward(x, &self.weight(), self.stride, grad_out)?;
        if self.params[0].trainable {
            self.params[0].accumulate(gw.data());
        }
        Ok(vec![gx])
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    fn flops(&self, input: Shape4) -> u64 {
        let (h, w) = strided_size(input.h, input.w, self.stride);
        input.n as u64
            * count_flops(&FlopsDesc::Conv {
                out_channels: self.out_channels,
                in_channels: self.in_channels,
                kernel: 1,
                out_h: h,
                out_w: w,
            })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// 3x3 depthwise convolution with same padding.
pub struct Depthwise<T> {
    channels: usize,
    stride: usize,
    params: [Param<T>; 1],
    cache: Option<Tensor<T>>,
}

impl<T: Element> Depthwise<T> {
    pub fn new(channels: usize, stride: usize, weight: Vec<T>) -> Self {
        Depthwise {
            channels,
            stride,
            params: [Param::new("weight", vec![channels, 1, 3, 3], weight, ParamRole::Weight)],
            cache: None,
        }
    }

    fn weight(&self) -> Tensor<T> {
        Tensor::from_vec(Shape4::new(self.channels, 1, 3, 3), self.params[0].value.clone())
            .expect("weight shape")
    }
}

impl<T: Element> Layer<T> for Depthwise<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Depthwise
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let s = single_shape(inputs, "dwconv")?;
        if s.c != self.channels {
            return Err(Error::shape(format!("expects {} channels, input is {s}", self.channels)));
        }
        let (h, w) = strided_size(s.h, s.w, self.stride);
        Ok(Shape4::new(s.n, s.c, h, w))
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "dwconv")?;
        let y = conv_depthwise(x, &self.weight(), self.stride, 1)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or_else(no_cache)?;
        let (gx, gw) = conv_depthwise_backward(x, &self.weight(), self.stride, 1, grad_out)?;
        if self.params[0].trainable {
            self.params[0].accumulate(gw.data());
        }
        Ok(vec![gx])
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    fn flops(&self, input: Shape4) -> u64 {
        let (h, w) = strided_size(input.h, input.w, self.stride);
        input.n as u64
            * count_flops(&FlopsDesc::Depthwise {
                channels: self.channels,
                kernel: 9,
                out_h: h,
                out_w: w,
            })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Active shift layer.
pub struct Shift<T: Element> {
    channels: usize,
    stride: usize,
    init_mode: InitMode,
    params: [Param<T>; 1],
    cache: Option<AslCache<T>>,
}

impl<T: Element> Shift<T> {
    pub fn new(theta: ShiftParams<T>, stride: usize) -> Self {
        let channels = theta.channels();
        let init_mode = theta.init_mode;
        let trainable = theta.trainable;
        let mut p = Param::new("shift", vec![channels, 2], theta.into_interleaved(), ParamRole::Shift);
        p.trainable = trainable;
        Shift {
            channels,
            stride,
            init_mode,
            params: [p],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn theta(&self) -> ShiftParams<T> {
        let mut t = ShiftParams::from_interleaved(self.params[0].value.clone(), self.init_mode)
            .expect("shift pairs");
        t.trainable = self.params[0].trainable;
        t
    }
}

impl<T: Element> Layer<T> for Shift<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Shift
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let s = single_shape(inputs, "asl")?;
        if s.c != self.channels {
            return Err(Error::shape(format!("expects {} channels, input is {s}", self.channels)));
        }
        let (h, w) = strided_size(s.h, s.w, self.stride);
        Ok(Shape4::new(s.n, s.c, h, w))
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "asl")?;
        let (y, cache) = asl_forward_raw(x, &self.params[0].value, self.stride)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(no_cache)?;
        let trainable = self.params[0].trainable;
        let grads = asl_backward_with(grad_out, cache, trainable)?;
        if trainable {
            let g: Vec<T> = grads.shift.iter().map(|&v| T::from_f64_lossy(v)).collect();
            self.params[0].accumulate(&g);
        }
        Ok(vec![grads.input])
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    fn shift_init_mode(&self) -> Option<InitMode> {
        Some(self.init_mode)
    }

    fn flops(&self, input: Shape4) -> u64 {
        // Four multiply-adds per interpolated output.
        let (h, w) = strided_size(input.h, input.w, self.stride);
        input.n as u64
            * count_flops(&FlopsDesc::Elementwise {
                channels: input.c,
                h,
                w,
                ops_per_element: 4,
            })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
    shape: Shape4,
}

/// Per-channel batch normalisation with affine scale and bias.
pub struct BatchNorm<T> {
    channels: usize,
    params: [Param<T>; 2],
    /// running_mean, running_var, batches_tracked
    buffers: [Buffer<T>; 3],
    cache: Option<BnCache<T>>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            params: [
                Param::new("gamma", vec![channels], vec![T::one(); channels], ParamRole::BnAffine),
                Param::new("beta", vec![channels], vec![T::zero(); channels], ParamRole::BnAffine),
            ],
            buffers: [
                Buffer::new("running_mean", vec![T::zero(); channels]),
                Buffer::new("running_var", vec![T::one(); channels]),
                Buffer::new("batches_tracked", vec![T::zero()]),
            ],
            cache: None,
        }
    }

    pub fn has_statistics(&self) -> bool {
        self.buffers[2].value[0] > T::zero()
    }

    pub fn running_mean(&self) -> &[T] {
        &self.buffers[0].value
    }

    pub fn running_var(&self) -> &[T] {
        &self.buffers[1].value
    }
}

impl<T: Element> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::BatchNorm
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let s = single_shape(inputs, "bn")?;
        if s.c != self.channels {
            return Err(Error::shape(format!("expects {} channels, input is {s}", self.channels)));
        }
        Ok(s)
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "bn")?;
        let s = x.shape();
        if s.c != self.channels {
            return Err(Error::shape(format!("expects {} channels, input is {s}", self.channels)));
        }
        let count = s.n * s.plane();
        let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let stats = parallel::map_range(s.c, |c| {
                    let mut sum = 0.0f64;
                    for n in 0..s.n {
                        sum += x.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for n in 0..s.n {
                        sq += x
                            .plane(n, c)
                            .iter()
                            .map(|v| {
                                let d = v.to_f64_lossy() - mean;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    (mean, sq / count as f64)
                });
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let tracked = self.buffers[2].value[0].to_f64_lossy();
                for (c, &(m, v)) in stats.iter().enumerate() {
                    let rm = &mut self.buffers[0].value[c];
                    *rm = T::from_f64_lossy(BN_MOMENTUM * rm.to_f64_lossy() + (1.0 - BN_MOMENTUM) * m);
                    let rv = &mut self.buffers[1].value[c];
                    *rv = T::from_f64_lossy(
                        BN_MOMENTUM * rv.to_f64_lossy() + (1.0 - BN_MOMENTUM) * v * unbias,
                    );
                }
                self.buffers[2].value[0] = T::from_f64_lossy(tracked + 1.0);
                stats
                    .iter()
                    .map(|&(m, v)| (T::from_f64_lossy(m), T::from_f64_lossy(1.0 / (v + BN_EPSILON).sqrt())))
                    .unzip()
            }
            Mode::Eval => {
                if !self.has_statistics() {
                    return Err(Error::State(
                        "batch norm evaluated before any training statistics were collected".into(),
                    ));
                }
                (0..s.c)
                    .map(|c| {
                        let v = self.buffers[1].value[c].to_f64_lossy();
                        (self.buffers[0].value[c], T::from_f64_lossy(1.0 / (v + BN_EPSILON).sqrt()))
                    })
                    .unzip()
            }
        };
        let gamma = &self.params[0].value;
        let beta = &self.params[1].value;
        let mut xhat = vec![T::zero(); s.len()];
        parallel::for_each_chunk(&mut xhat, s.plane(), |plane, out| {
            let c = plane % s.c;
            for (o, &v) in out.iter_mut().zip(x.plane(plane / s.c, c)) {
                *o = (v - mean[c]) * inv_std[c];
            }
        });
        let mut y = vec![T::zero(); s.len()];
        parallel::for_each_chunk(&mut y, s.plane(), |plane, out| {
            let c = plane % s.c;
            let src = &xhat[plane * s.plane()..(plane + 1) * s.plane()];
            for (o, &v) in out.iter_mut().zip(src) {
                *o = gamma[c] * v + beta[c];
            }
        });
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            mode,
            shape: s,
        });
        Tensor::from_vec(s, y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(no_cache)?;
        let s = cache.shape;
        grad_out.expect_shape(s, "bn gradient")?;
        let gy = grad_out.data();
        let plane = s.plane();
        // Per channel: sum(dy) and sum(dy * xhat), in f64.
        let sums = parallel::map_range(s.c, |c| {
            let (mut sd, mut sdx) = (0.0f64, 0.0f64);
            for n in 0..s.n {
                let off = (n * s.c + c) * plane;
                for (g, xh) in gy[off..off + plane].iter().zip(&cache.xhat[off..off + plane]) {
                    let g = g.to_f64_lossy();
                    sd += g;
                    sdx += g * xh.to_f64_lossy();
                }
            }
            (sd, sdx)
        });
        let gamma = self.params[0].value.clone();
        let count = (s.n * plane) as f64;
        let mut gx = vec![T::zero(); s.len()];
        let mode = cache.mode;
        parallel::for_each_chunk(&mut gx, plane, |p, out| {
            let c = p % s.c;
            let g = gamma[c].to_f64_lossy();
            let inv = cache.inv_std[c].to_f64_lossy();
            let (sd, sdx) = sums[c];
            let off = p * plane;
            for (i, o) in out.iter_mut().enumerate() {
                let dy = gy[off + i].to_f64_lossy();
                let v = match mode {
                    Mode::Train => {
                        let xh = cache.xhat[off + i].to_f64_lossy();
                        g * inv * (dy - sd / count - xh * sdx / count)
                    }
                    Mode::Eval => g * inv * dy,
                };
                *o = T::from_f64_lossy(v);
            }
        });
        if self.params[0].trainable {
            let g: Vec<T> = sums.iter().map(|&(_, sdx)| T::from_f64_lossy(sdx)).collect();
            self.params[0].accumulate(&g);
        }
        if self.params[1].trainable {
            let g: Vec<T> = sums.iter().map(|&(sd, _)| T::from_f64_lossy(sd)).collect();
            self.params[1].accumulate(&g);
        }
        Ok(vec![Tensor::from_vec(s, gx)?])
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    fn flops(&self, input: Shape4) -> u64 {
        input.len() as u64
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Element> Relu<T> {
    pub fn new() -> Self {
        Relu { cache: None }
    }
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

impl<T: Element> Layer<T> for Relu<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Relu
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        single_shape(inputs, "relu")
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "relu")?;
        self.cache = Some(x.clone());
        Ok(relu(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or_else(no_cache)?;
        Ok(vec![grad_out.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })?])
    }

    fn flops(&self, input: Shape4) -> u64 {
        input.len() as u64
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Element-wise sum of two inputs.
#[derive(Default)]
pub struct Add {
    seen: bool,
}

impl Add {
    pub fn new() -> Self {
        Add { seen: false }
    }
}

impl<T: Element> Layer<T> for Add {
    fn kind(&self) -> LayerKind {
        LayerKind::Add
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        match inputs {
            [a, b] if a == b => Ok(*a),
            [a, b] => Err(Error::shape(format!("cannot add {a} and {b}"))),
            _ => Err(Error::shape(format!("add takes two inputs, got {}", inputs.len()))),
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let [a, b] = inputs else {
            return Err(Error::shape(format!("add takes two inputs, got {}", inputs.len())));
        };
        self.seen = true;
        a.add(b)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if !self.seen {
            return Err(no_cache());
        }
        Ok(vec![grad_out.clone(), grad_out.clone()])
    }

    fn flops(&self, input: Shape4) -> u64 {
        input.len() as u64
    }

    fn clear_cache(&mut self) {
        self.seen = false;
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    cache: Option<Shape4>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache: None }
    }
}

pub fn global_avgpool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let scale = 1.0 / s.plane() as f64;
    let data = (0..s.n * s.c)
        .map(|i| {
            let plane = &x.data()[i * s.plane()..(i + 1) * s.plane()];
            T::from_f64_lossy(plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() * scale)
        })
        .collect();
    Tensor::from_vec(Shape4::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

impl<T: Element> Layer<T> for GlobalAvgPool {
    fn kind(&self) -> LayerKind {
        LayerKind::GlobalAvgPool
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let s = single_shape(inputs, "avgpool")?;
        Ok(Shape4::new(s.n, s.c, 1, 1))
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "avgpool")?;
        self.cache = Some(x.shape());
        Ok(global_avgpool(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let s = self.cache.ok_or_else(no_cache)?;
        grad_out.expect_shape(Shape4::new(s.n, s.c, 1, 1), "avgpool gradient")?;
        let scale = T::from_f64_lossy(1.0 / s.plane() as f64);
        let g = grad_out.data();
        Ok(vec![Tensor::from_fn(s, |n, c, _, _| g[n * s.c + c] * scale)])
    }

    fn flops(&self, input: Shape4) -> u64 {
        input.len() as u64
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Fully connected layer on `(N, C, 1, 1)` features.
pub struct Linear<T> {
    in_features: usize,
    out_features: usize,
    params: [Param<T>; 2],
    cache: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, weight: Vec<T>, bias: Vec<T>) -> Self {
        Linear {
            in_features,
            out_features,
            params: [
                Param::new("weight", vec![out_features, in_features], weight, ParamRole::Weight),
                Param::new("bias", vec![out_features], bias, ParamRole::Bias),
            ],
            cache: None,
        }
    }
}

impl<T: Element> Layer<T> for Linear<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Linear
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let s = single_shape(inputs, "fc")?;
        if s.example() != self.in_features {
            return Err(Error::shape(format!(
                "expects {} features, input is {s}",
                self.in_features
            )));
        }
        Ok(Shape4::new(s.n, self.out_features, 1, 1))
    }

    fn forward(&mut self, inputs: &[&Tensor<T>], _mode: Mode) -> Result<Tensor<T>> {
        let x = single(inputs, "fc")?;
        let out_shape = self.output_shape(&[x.shape()])?;
        let (k, f) = (self.out_features, self.in_features);
        let (w, b) = (&self.params[0].value, &self.params[1].value);
        let mut y = vec![T::zero(); out_shape.len()];
        for n in 0..x.shape().n {
            let xe = x.example(n);
            for o in 0..k {
                let mut acc = T::zero();
                for (&wv, &xv) in w[o * f..(o + 1) * f].iter().zip(xe) {
                    acc = acc + wv * xv;
                }
                y[n * k + o] = acc + b[o];
            }
        }
        self.cache = Some(x.clone());
        Tensor::from_vec(out_shape, y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or_else(no_cache)?;
        let n_batch = x.shape().n;
        grad_out.expect_shape(Shape4::new(n_batch, self.out_features, 1, 1), "fc gradient")?;
        let (k, f) = (self.out_features, self.in_features);
        let g = grad_out.data();
        let w = &self.params[0].value;
        let mut gx = vec![T::zero(); n_batch * f];
        for n in 0..n_batch {
            for o in 0..k {
                let go = g[n * k + o];
                for (gi, &wv) in gx[n * f..(n + 1) * f].iter_mut().zip(&w[o * f..(o + 1) * f]) {
                    *gi = *gi + go * wv;
                }
            }
        }
        if self.params[0].trainable {
            let mut gw = vec![T::zero(); k * f];
            for n in 0..n_batch {
                let xe = x.example(n);
                for o in 0..k {
                    let go = g[n * k + o];
                    for (gwi, &xv) in gw[o * f..(o + 1) * f].iter_mut().zip(xe) {
                        *gwi = *gwi + go * xv;
                    }
                }
            }
            self.params[0].accumulate(&gw);
        }
        if self.params[1].trainable {
            let mut gb = vec![T::zero(); k];
            for n in 0..n_batch {
                for o in 0..k {
                    gb[o] = gb[o] + g[n * k + o];
                }
            }
            self.params[1].accumulate(&gb);
        }
        Ok(vec![Tensor::from_vec(x.shape(), gx)?])
    }

    fn params(&self) -> &[Param<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    fn flops(&self, input: Shape4) -> u64 {
        (input.n * self.in_features * self.out_features) as u64
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    let k = s.example();
    if labels.len() != s.n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![T::zero(); s.len()];
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::shape(format!("label {label} out of range for {k} classes")));
        }
        let row = logits.example(n);
        let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label].to_f64_lossy();
        for (j, e) in exps.iter().enumerate() {
            let p = e / z;
            let target = if j == label { 1.0 } else { 0.0 };
            grad[n * k + j] = T::from_f64_lossy((p - target) / s.n as f64);
        }
    }
    Ok((loss / s.n as f64, Tensor::from_vec(s, grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 4), vec![-2.0f32, -0.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn avgpool_of_constant() {
        let x = Tensor::full(Shape4::new(2, 3, 4, 5), 1.25f64);
        assert!(global_avgpool(&x).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn bn_normalises_batch() {
        let x = Tensor::<f64>::from_fn(Shape4::new(4, 2, 3, 3), |n, c, h, w| {
            (n * 7 + h * 3 + w) as f64 * (c + 1) as f64 + c as f64 * 10.0
        });
        let mut bn = BatchNorm::new(2);
        let y = bn.forward(&[&x], Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bn_eval_requires_statistics() {
        let mut bn = BatchNorm::<f32>::new(2);
        let x = Tensor::zeros(Shape4::new(1, 2, 2, 2));
        assert!(matches!(bn.forward(&[&x], Mode::Eval), Err(Error::State(_))));
        bn.forward(&[&x], Mode::Train).unwrap();
        assert!(bn.forward(&[&x], Mode::Eval).is_ok());
    }

    #[test]
    fn bn_running_statistics_momentum() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        bn.forward(&[&x], Mode::Train).unwrap();
        // mean 2, unbiased var 2
        assert!((bn.running_mean()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut relu = Relu::<f32>::new();
        let g = Tensor::zeros(Shape4::new(1, 1, 1, 1));
        assert!(matches!(relu.backward(&g), Err(Error::State(_))));
        let mut pw = Pointwise::<f32>::new(1, 1, 1, vec![1.0]);
        assert!(matches!(pw.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn xent_uniform_logits() {
        let logits = Tensor::<f64>::zeros(Shape4::new(3, 10, 1, 1));
        let (loss, grad) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        // Each row's gradient sums to zero.
        for n in 0..3 {
            assert!(grad.example(n).iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(softmax_xent(&logits, &[10, 0, 0]).is_err());
    }

    #[test]
    fn shift_layer_param_count() {
        let theta = crate::shift::init_shift::<f32>(InitMode::UniformReal, 13, 0).unwrap();
        let layer = Shift::new(theta, 1);
        assert_eq!(layer.params()[0].len(), 26);
    }
}
