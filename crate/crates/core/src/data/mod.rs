//! Datasets, batching and augmentation.

pub mod augment;
pub mod cifar;
pub mod synthetic;

use std::ops::Range;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor};
use augment::CropFlip;
use cifar::{CifarData, CifarKind, PIXELS, SIDE};

/// SplitMix64 finalizer; derives independent stream seeds from `(seed, index)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn compute(data: &CifarData) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("cannot compute statistics of an empty split".into()));
        }
        let plane = SIDE * SIDE;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in data.pixels.chunks_exact(PIXELS) {
            for c in 0..3 {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (data.len() * plane) as f64;
        let mut stats = NormStats { mean: [0.0; 3], std: [1.0; 3] };
        for c in 0..3 {
            let m = sum[c] / n;
            stats.mean[c] = m;
            stats.std[c] = (sq[c] / n - m * m).max(0.0).sqrt().max(1e-6);
        }
        Ok(stats)
    }
}

/// Normalizes the images at `indices` into an `(n, 3, 32, 32)` batch,
/// applying `augs[i]` to the i-th image when given.
pub fn make_batch<T: Element>(
    data: &CifarData,
    indices: &[usize],
    stats: &NormStats,
    augs: Option<&[CropFlip]>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let plane = SIDE * SIDE;
    let mut out = vec![T::zero(); indices.len() * PIXELS];
    let mut scratch = vec![T::zero(); PIXELS];
    for (b, &i) in indices.iter().enumerate() {
        let img = data.image(i);
        for c in 0..3 {
            let (m, s) = (stats.mean[c], stats.std[c]);
            for k in 0..plane {
                scratch[c * plane + k] = T::from_f64_lossy((img[c * plane + k] as f64 / 255.0 - m) / s);
            }
        }
        let dst = &mut out[b * PIXELS..(b + 1) * PIXELS];
        match augs {
            Some(a) => a[b].apply(&scratch, 3, SIDE, dst),
            None => dst.copy_from_slice(&scratch),
        }
    }
    let labels = indices.iter().map(|&i| data.labels[i] as usize).collect();
    Ok((Tensor::from_vec(Shape4::new(indices.len(), 3, SIDE, SIDE), out)?, labels))
}

/// Epoch-wise shuffled batches, addressable by iteration number so a resumed
/// run sees exactly the batches an uninterrupted run would have.
#[derive(Debug, Clone)]
pub struct Sampler {
    len: usize,
    batch: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Config("sampler needs a non-empty dataset and batch".into()));
        }
        Ok(Sampler { len, batch, seed, cached: None })
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut p: Vec<usize> = (0..self.len).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch)));
            self.cached = Some((epoch, p));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    pub fn indices(&mut self, iteration: u64) -> Vec<usize> {
        let start = iteration as u128 * self.batch as u128;
        (0..self.batch as u128)
            .map(|k| {
                let pos = start + k;
                let epoch = (pos / self.len as u128) as u64;
                let at = (pos % self.len as u128) as usize;
                self.permutation(epoch)[at]
            })
            .collect()
    }

    /// Augmentations for one iteration, from a stream independent of the order.
    pub fn augmentations(&self, iteration: u64) -> Vec<CropFlip> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed ^ 0xA116_0000, iteration));
        (0..self.batch).map(|_| CropFlip::sample(&mut rng)).collect()
    }
}

/// Class-dependent colour blobs on noise; a learnable stand-in for CIFAR in tests.
pub fn synthetic_cifar(count: usize, kind: CifarKind, seed: u64) -> CifarData {
    let classes = kind.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = CifarData::empty(kind);
    for i in 0..count {
        let label = (i % classes) as u8;
        let (cy, cx) = ((label as usize * 7) % 24 + 4, (label as usize * 13) % 24 + 4);
        for c in 0..3 {
            let tint = ((label as usize + c * 3) % classes) as f64 / classes as f64;
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
                    let blob = (-d2 / 40.0).exp();
                    let noise: f64 = rng.random_range(-0.15..0.15);
                    let v = 0.3 + 0.5 * blob * tint + noise;
                    data.pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        if kind == CifarKind::Cifar100 {
            data.coarse.push(label / 5);
        }
        data.labels.push(label);
    }
    data
}

/// Produces items on a background thread through a bounded queue.
pub struct Prefetcher<B> {
    rx: Option<Receiver<Result<B>>>,
    handle: Option<JoinHandle<()>>,
}

impl<B: Send + 'static> Prefetcher<B> {
    pub fn spawn<F>(range: Range<u64>, depth: usize, mut produce: F) -> Self
    where
        F: FnMut(u64) -> Result<B> + Send + 'static,
    {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for i in range {
                let item = produce(i);
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        Prefetcher {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl<B> Iterator for Prefetcher<B> {
    type Item = Result<B>;

    fn next(&mut self) -> Option<Result<B>> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<B> Drop for Prefetcher<B> {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
