//! Shift operators: integer shift, grouped shift, the decomposition of a
//! spatial convolution into shifted pointwise convolutions, and the active
//! shift layer (per-channel fractional shift through bilinear interpolation).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{conv_pointwise, ConvSpec, KernelOffset, Matrix};
use crate::parallel;
use crate::tensor::{Element, Shape4, Tensor};

/// `Y[n, c, m, p] = X[n, c, m + di, p + dj]`, zero outside the map.
pub fn shift_integer<T: Element>(x: &Tensor<T>, offset: KernelOffset) -> Tensor<T> {
    let s = x.shape();
    let mut out = vec![T::zero(); s.len()];
    parallel::for_each_chunk(&mut out, s.plane(), |plane, y| {
        shift_plane(x.plane(plane / s.c, plane % s.c), y, s.h, s.w, offset.di, offset.dj);
    });
    Tensor::from_vec(s, out).expect("shape preserved")
}

fn shift_plane<T: Element>(src: &[T], dst: &mut [T], h: usize, w: usize, di: isize, dj: isize) {
    for m in 0..h {
        let sm = m as isize + di;
        if sm < 0 || sm as usize >= h {
            continue;
        }
        for p in 0..w {
            let sp = p as isize + dj;
            if sp >= 0 && (sp as usize) < w {
                dst[m * w + p] = src[sm as usize * w + sp as usize];
            }
        }
    }
}

/// Evaluates a zero-padded convolution as the sum over kernel taps of
/// pointwise convolutions applied to integer-shifted copies of the input.
///
/// Requires "same" padding (`2 * padding + 1 == side`) so that every shifted
/// copy keeps the input's spatial size.
pub fn decompose_conv<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.c != spec.in_channels {
        return Err(Error::shape(format!(
            "convolution expects {} input channels, input has shape {xs}",
            spec.in_channels
        )));
    }
    weight.expect_shape(spec.weight_shape(), "convolution weight")?;
    let side = spec.side();
    if 2 * spec.padding + 1 != side {
        return Err(Error::shape(format!(
            "decomposition needs same padding; kernel side {side} with padding {}",
            spec.padding
        )));
    }
    let (d, c) = (spec.out_channels, spec.in_channels);
    let mut acc: Option<Tensor<T>> = None;
    for offset in spec.offsets() {
        let wk: Vec<T> = (0..d * c).map(|i| weight.data()[i * spec.kernel + offset.k]).collect();
        let wk = Matrix::from_vec(d, c, wk)?;
        let shifted = if offset.di == 0 && offset.dj == 0 {
            x.clone()
        } else {
            shift_integer(x, offset)
        };
        let term = conv_pointwise(&shifted, &wk, spec.stride)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("kernel has at least one tap"))
}

/// Channel grouping of the heuristic (parameter-free) grouped shift.
///
/// Channels are split into groups of `per_group = floor(C / K)`; group `g`
/// takes the `g`-th kernel offset. When `K` does not divide `C` the leftover
/// channels form one extra group with offset (0, 0). With fewer channels than
/// taps every channel is its own group and takes the offsets in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedShiftSpec {
    channels: usize,
    per_group: usize,
    groups: usize,
    offsets: Vec<KernelOffset>,
}

impl GroupedShiftSpec {
    pub fn new(channels: usize, offsets: Vec<KernelOffset>) -> Result<Self> {
        let k = offsets.len();
        if channels == 0 || k == 0 {
            return Err(Error::Config(format!(
                "grouped shift needs channels and offsets (C={channels}, K={k})"
            )));
        }
        let per_group = channels / k;
        let groups = if per_group == 0 {
            channels
        } else if channels.is_multiple_of(k) {
            k
        } else {
            k + 1
        };
        Ok(GroupedShiftSpec {
            channels,
            per_group,
            groups,
            offsets,
        })
    }

    /// Groups emulating a centred 3x3 kernel.
    pub fn grid3x3(channels: usize) -> Result<Self> {
        Self::new(channels, KernelOffset::grid3x3().to_vec())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> usize {
        self.offsets.len()
    }

    pub fn per_group(&self) -> usize {
        self.per_group
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_of(&self, channel: usize) -> usize {
        match channel.checked_div(self.per_group) {
            Some(g) => g.min(self.offsets.len()),
            None => channel,
        }
    }

    /// Integer displacement `(di, dj)` applied to `channel`.
    pub fn channel_offset(&self, channel: usize) -> (isize, isize) {
        match self.offsets.get(self.group_of(channel)) {
            Some(o) => (o.di, o.dj),
            None => (0, 0),
        }
    }
}

/// Applies a [`GroupedShiftSpec`] to every channel.
pub fn shift_grouped<T: Element>(x: &Tensor<T>, spec: &GroupedShiftSpec) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != spec.channels {
        return Err(Error::shape(format!(
            "grouped shift built for {} channels applied to input {s}",
            spec.channels
        )));
    }
    let mut out = vec![T::zero(); s.len()];
    parallel::for_each_chunk(&mut out, s.plane(), |plane, y| {
        let (n, c) = (plane / s.c, plane % s.c);
        let (di, dj) = spec.channel_offset(c);
        shift_plane(x.plane(n, c), y, s.h, s.w, di, dj);
    });
    Tensor::from_vec(s, out)
}

/// How shift parameters are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitMode {
    /// Integer offsets from the channel-grouping heuristic.
    GroupedHeuristic,
    /// Standard normal samples rounded to the nearest integer.
    SampledInteger,
    /// Standard normal samples.
    SampledReal,
    /// Uniform samples in [-1, 1].
    UniformReal,
}

impl InitMode {
    pub const ALL: [InitMode; 4] = [
        InitMode::GroupedHeuristic,
        InitMode::SampledInteger,
        InitMode::SampledReal,
        InitMode::UniformReal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitMode::GroupedHeuristic => "grouped",
            InitMode::SampledInteger => "int-normal",
            InitMode::SampledReal => "real-normal",
            InitMode::UniformReal => "uniform",
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown shift init mode {s:?} (expected grouped, int-normal, real-normal or uniform)"
                ))
            })
    }
}

/// Per-channel shift amounts `(alpha_c, beta_c)` in pixels. `alpha` moves
/// along rows (height), `beta` along columns (width).
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftParams<T> {
    /// Interleaved `[alpha_0, beta_0, alpha_1, beta_1, ...]`.
    values: Vec<T>,
    pub trainable: bool,
    pub init_mode: InitMode,
}

impl<T: Element> ShiftParams<T> {
    pub fn from_pairs(pairs: &[(T, T)], init_mode: InitMode) -> Self {
        ShiftParams {
            values: pairs.iter().flat_map(|&(a, b)| [a, b]).collect(),
            trainable: true,
            init_mode,
        }
    }

    pub fn from_interleaved(values: Vec<T>, init_mode: InitMode) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(2) {
            return Err(Error::shape(format!(
                "shift parameters need 2 values per channel, got {}",
                values.len()
            )));
        }
        Ok(ShiftParams {
            values,
            trainable: true,
            init_mode,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.len() / 2
    }

    /// Always `2 * channels()`.
    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn alpha(&self, c: usize) -> T {
        self.values[2 * c]
    }

    pub fn beta(&self, c: usize) -> T {
        self.values[2 * c + 1]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.values.chunks_exact(2).map(|p| (p[0], p[1]))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_interleaved(self) -> Vec<T> {
        self.values
    }
}

/// Draws `channels` shift pairs. Reproducible for a given seed.
pub fn init_shift<T: Element>(mode: InitMode, channels: usize, seed: u64) -> Result<ShiftParams<T>> {
    if channels == 0 {
        return Err(Error::Config("shift layer needs at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(2 * channels);
    match mode {
        InitMode::GroupedHeuristic => {
            let spec = GroupedShiftSpec::grid3x3(channels)?;
            for c in 0..channels {
                let (di, dj) = spec.channel_offset(c);
                values.push(T::from_f64_lossy(di as f64));
                values.push(T::from_f64_lossy(dj as f64));
            }
        }
        InitMode::SampledInteger => {
            for _ in 0..2 * channels {
                let v: f64 = StandardNormal.sample(&mut rng);
                values.push(T::from_f64_lossy(v.round()));
            }
        }
        InitMode::SampledReal => {
            for _ in 0..2 * channels {
                let v: f64 = StandardNormal.sample(&mut rng);
                values.push(T::from_f64_lossy(v));
            }
        }
        InitMode::UniformReal => {
            for _ in 0..2 * channels {
                values.push(T::from_f64_lossy(rng.random_range(-1.0..=1.0)));
            }
        }
    }
    ShiftParams::from_interleaved(values, mode)
}

/// Bilinear sampling geometry of one channel: integer base displacement and
/// fractional parts in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationStencil<T> {
    pub floor_alpha: isize,
    pub floor_beta: isize,
    pub frac_alpha: T,
    pub frac_beta: T,
}

impl<T: Element> InterpolationStencil<T> {
    pub fn new(alpha: T, beta: T) -> Self {
        let (fa, fb) = (alpha.floor(), beta.floor());
        InterpolationStencil {
            floor_alpha: fa.to_isize().unwrap_or(0),
            floor_beta: fb.to_isize().unwrap_or(0),
            frac_alpha: alpha - fa,
            frac_beta: beta - fb,
        }
    }

    pub fn is_integral(&self) -> bool {
        self.frac_alpha == T::zero() && self.frac_beta == T::zero()
    }

    /// The four neighbours `[Z1, Z2, Z3, Z4]` of output position `(m, p)`:
    /// Z1 at the floor point, Z2 one column right, Z3 one row down, Z4 both.
    #[inline]
    pub fn samples(&self, plane: &[T], h: usize, w: usize, m: usize, p: usize) -> [T; 4] {
        let r0 = m as isize + self.floor_alpha;
        let c0 = p as isize + self.floor_beta;
        let at = |r: isize, c: isize| {
            if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                T::zero()
            } else {
                plane[r as usize * w + c as usize]
            }
        };
        [at(r0, c0), at(r0, c0 + 1), at(r0 + 1, c0), at(r0 + 1, c0 + 1)]
    }

    /// Bilinear weights matching [`Self::samples`].
    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        let (da, db) = (self.frac_alpha, self.frac_beta);
        [
            (one - da) * (one - db),
            (one - da) * db,
            da * (one - db),
            da * db,
        ]
    }
}

/// State saved by [`asl_forward`] for [`asl_backward`].
#[derive(Debug, Clone)]
pub struct AslCache<T: Element> {
    input: Tensor<T>,
    stencils: Vec<InterpolationStencil<T>>,
    stride: usize,
    out_shape: Shape4,
}

impl<T: Element> AslCache<T> {
    pub fn stencils(&self) -> &[InterpolationStencil<T>] {
        &self.stencils
    }

    pub fn out_shape(&self) -> Shape4 {
        self.out_shape
    }
}

/// Gradients returned by [`asl_backward`].
#[derive(Debug, Clone)]
pub struct AslGrads<T: Element> {
    pub input: Tensor<T>,
    /// Interleaved `[dL/dalpha_0, dL/dbeta_0, ...]`, summed over batch and space.
    pub shift: Vec<f64>,
}

/// Output spatial size of a strided shift.
pub fn strided_size(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// Active shift layer forward pass.
pub fn asl_forward<T: Element>(
    x: &Tensor<T>,
    theta: &ShiftParams<T>,
    stride: usize,
) -> Result<(Tensor<T>, AslCache<T>)> {
    asl_forward_raw(x, theta.as_slice(), stride)
}

/// [`asl_forward`] taking the interleaved `(alpha, beta)` slice directly.
///
/// Channel `c` is resampled at `(m + alpha_c, p + beta_c)`; out-of-range
/// neighbours read as zero. With `stride > 1` only every `stride`-th output
/// position is evaluated.
pub fn asl_forward_raw<T: Element>(
    x: &Tensor<T>,
    shifts: &[T],
    stride: usize,
) -> Result<(Tensor<T>, AslCache<T>)> {
    let s = x.shape();
    if shifts.len() != 2 * s.c {
        return Err(Error::shape(format!(
            "shift layer has {} parameter pairs but input {s} has {} channels",
            shifts.len() / 2,
            s.c
        )));
    }
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let stencils: Vec<_> = shifts
        .chunks_exact(2)
        .map(|p| InterpolationStencil::new(p[0], p[1]))
        .collect();
    let (oh, ow) = strided_size(s.h, s.w, stride);
    let out_shape = Shape4::new(s.n, s.c, oh, ow);
    let mut out = vec![T::zero(); out_shape.len()];
    parallel::for_each_chunk(&mut out, oh * ow, |plane, y| {
        let (n, c) = (plane / s.c, plane % s.c);
        let st = &stencils[c];
        let src = x.plane(n, c);
        if st.is_integral() {
            for m in 0..oh {
                for p in 0..ow {
                    y[m * ow + p] = st.samples(src, s.h, s.w, m * stride, p * stride)[0];
                }
            }
            return;
        }
        let [w1, w2, w3, w4] = st.weights();
        for m in 0..oh {
            for p in 0..ow {
                let [z1, z2, z3, z4] = st.samples(src, s.h, s.w, m * stride, p * stride);
                y[m * ow + p] = z1 * w1 + z3 * w3 + z2 * w2 + z4 * w4;
            }
        }
    });
    Ok((
        Tensor::from_vec(out_shape, out)?,
        AslCache {
            input: x.clone(),
            stencils,
            stride,
            out_shape,
        },
    ))
}

/// Active shift layer backward pass.
///
/// The input gradient scatters each output gradient onto its four
/// neighbours with the forward weights. Shift gradients use
/// `d/dalpha = (Z3 - Z1)(1 - dbeta) + (Z4 - Z2) dbeta` and
/// `d/dbeta = (Z2 - Z1)(1 - dalpha) + (Z4 - Z3) dalpha`, accumulated in f64.
/// At integer shifts the floor stencil is used, i.e. the right derivative.
pub fn asl_backward<T: Element>(grad_out: &Tensor<T>, cache: &AslCache<T>) -> Result<AslGrads<T>> {
    asl_backward_with(grad_out, cache, true)
}

/// As [`asl_backward`]; `shift_grad = false` skips the shift gradient and
/// returns zeros for it.
pub fn asl_backward_with<T: Element>(
    grad_out: &Tensor<T>,
    cache: &AslCache<T>,
    shift_grad: bool,
) -> Result<AslGrads<T>> {
    grad_out.expect_shape(cache.out_shape, "shift layer gradient")?;
    let x = &cache.input;
    let s = x.shape();
    let os = cache.out_shape;
    let stride = cache.stride;
    let stencils = &cache.stencils;

    let mut gx = vec![T::zero(); s.len()];
    parallel::for_each_chunk(&mut gx, s.plane(), |plane, gplane| {
        let st = &stencils[plane % s.c];
        let gy = &grad_out.data()[plane * os.plane()..(plane + 1) * os.plane()];
        let weights = st.weights();
        let corners = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for m in 0..os.h {
            for p in 0..os.w {
                let g = gy[m * os.w + p];
                let r0 = (m * stride) as isize + st.floor_alpha;
                let c0 = (p * stride) as isize + st.floor_beta;
                for (&(dr, dc), &wt) in corners.iter().zip(&weights) {
                    let (r, c) = (r0 + dr, c0 + dc);
                    if r >= 0 && c >= 0 && (r as usize) < s.h && (c as usize) < s.w {
                        let idx = r as usize * s.w + c as usize;
                        gplane[idx] = gplane[idx] + g * wt;
                    }
                }
            }
        }
    });

    let mut shift = vec![0.0f64; 2 * s.c];
    if shift_grad {
        let per_channel = parallel::map_range(s.c, |c| {
            let st = &stencils[c];
            let (da, db) = (st.frac_alpha.to_f64_lossy(), st.frac_beta.to_f64_lossy());
            let (mut ga, mut gb) = (0.0f64, 0.0f64);
            for n in 0..s.n {
                let src = x.plane(n, c);
                let gy = &grad_out.data()[(n * s.c + c) * os.plane()..(n * s.c + c + 1) * os.plane()];
                for m in 0..os.h {
                    for p in 0..os.w {
                        let g = gy[m * os.w + p].to_f64_lossy();
                        if g == 0.0 {
                            continue;
                        }
                        let z = st.samples(src, s.h, s.w, m * stride, p * stride);
                        let [z1, z2, z3, z4] = z.map(|v| v.to_f64_lossy());
                        ga += g * ((z3 - z1) * (1.0 - db) + (z4 - z2) * db);
                        gb += g * ((z2 - z1) * (1.0 - da) + (z4 - z3) * da);
                    }
                }
            }
            (ga, gb)
        });
        for (c, (ga, gb)) in per_channel.into_iter().enumerate() {
            shift[2 * c] = ga;
            shift[2 * c + 1] = gb;
        }
    }
    Ok(AslGrads {
        input: Tensor::from_vec(s, gx)?,
        shift,
    })
}
