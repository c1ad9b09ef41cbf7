//! Pad-and-crop plus horizontal flip.

use rand::Rng;

/// Zero padding added on every side before cropping.
pub const PAD: usize = 4;

/// One sampled augmentation for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropFlip {
    /// Crop origin inside the padded image, each in `0..=2 * PAD`.
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl CropFlip {
    pub const IDENTITY: CropFlip = CropFlip {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        CropFlip {
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
        }
    }

    /// Writes the augmented `channels x side x side` image to `dst`.
    pub fn apply<T: Copy + Default>(&self, src: &[T], channels: usize, side: usize, dst: &mut [T]) {
        assert_eq!(src.len(), channels * side * side);
        assert_eq!(dst.len(), src.len());
        for c in 0..channels {
            let plane = &src[c * side * side..(c + 1) * side * side];
            let out = &mut dst[c * side * side..(c + 1) * side * side];
            for y in 0..side {
                let sy = (y + self.dy) as isize - PAD as isize;
                for x in 0..side {
                    let xx = if self.flip { side - 1 - x } else { x };
                    let sx = (xx + self.dx) as isize - PAD as isize;
                    out[y * side + x] = if sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side {
                        plane[sy as usize * side + sx as usize]
                    } else {
                        T::default()
                    };
                }
            }
        }
    }
}
