//! Synthetic shift-recovery data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const MAX_SHIFT: f64 = 8.0;

/// Gaussian-blurred white noise, rescaled to zero mean and unit variance.
pub fn smooth_image(h: usize, w: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    // Separable blur with clamped borders.
    let blur = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for m in 0..h {
            for n in 0..w {
                let mut acc = 0.0;
                for (t, d) in taps.iter().zip(-radius..=radius) {
                    let (mm, nn) = if along_rows {
                        ((m as isize + d).clamp(0, h as isize - 1) as usize, n)
                    } else {
                        (m, (n as isize + d).clamp(0, w as isize - 1) as usize)
                    };
                    acc += t * src[mm * w + nn];
                }
                out[m * w + n] = acc / norm;
            }
        }
        out
    };
    let img = blur(&blur(&noise, true), false);
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64;
    let sd = var.sqrt().max(1e-12);
    img.into_iter().map(|v| (v - mean) / sd).collect()
}

/// Samples `img` at `(m + alpha, n + beta)` for every pixel, zero outside.
///
/// Interpolates along columns first and then along rows, written
/// independently of the layer kernels so it can serve as their oracle.
pub fn reference_shift(img: &[f64], h: usize, w: usize, alpha: f64, beta: f64) -> Vec<f64> {
    let px = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            img[r as usize * w + c as usize]
        }
    };
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut out = Vec::with_capacity(h * w);
    for m in 0..h {
        for n in 0..w {
            let y = m as f64 + alpha;
            let x = n as f64 + beta;
            let (y0, x0) = (y.floor(), x.floor());
            let (ty, tx) = (y - y0, x - x0);
            let (r, c) = (y0 as i64, x0 as i64);
            let top = lerp(px(r, c), px(r, c + 1), tx);
            let bottom = lerp(px(r + 1, c), px(r + 1, c + 1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

/// Pairs of smooth single-channel images and their shifted copies.
#[derive(Debug, Clone)]
pub struct ShiftTask {
    pub inputs: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub true_shift: (f64, f64),
}

pub fn gen_shift_task(true_shift: (f64, f64), count: usize, side: usize, seed: u64) -> Result<ShiftTask> {
    let (alpha, beta) = true_shift;
    if !(alpha.abs() <= MAX_SHIFT && beta.abs() <= MAX_SHIFT) {
        return Err(Error::Config(format!(
            "true shift ({alpha}, {beta}) exceeds {MAX_SHIFT} px"
        )));
    }
    if count == 0 || side == 0 {
        return Err(Error::Config("shift task needs at least one non-empty image".into()));
    }
    let mut inputs = Vec::with_capacity(count * side * side);
    let mut targets = Vec::with_capacity(count * side * side);
    for i in 0..count {
        let img = smooth_image(side, side, 2.5, seed.wrapping_add(i as u64));
        targets.extend(reference_shift(&img, side, side, alpha, beta));
        inputs.extend(img);
    }
    let shape = Shape4::new(count, 1, side, side);
    Ok(ShiftTask {
        inputs: Tensor::from_vec(shape, inputs)?,
        targets: Tensor::from_vec(shape, targets)?,
        true_shift,
    })
}
