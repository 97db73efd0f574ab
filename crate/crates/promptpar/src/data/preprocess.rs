//! Geometric preprocessing: black-padding to square, bilinear resampling,
//! and the training-time crop/flip augmentation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::ImageTensor;
use crate::error::{Error, Result};

/// Center the image on a black square canvas of side `max(h, w)`.
/// Already-square images are returned as-is.
pub fn pad_to_square(image: &ImageTensor) -> ImageTensor {
    if image.height == image.width {
        return image.clone();
    }
    let side = image.height.max(image.width);
    let y0 = (side - image.height) / 2;
    let x0 = (side - image.width) / 2;
    let mut out = ImageTensor::zeros(side, side);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.set(y0 + y, x0 + x, c, image.get(y, x, c));
            }
        }
    }
    out
}

/// Bilinear resampling to `target x target` (half-pixel-center convention).
pub fn resize_bilinear(image: &ImageTensor, target: usize) -> ImageTensor {
    if image.height == target && image.width == target {
        return image.clone();
    }
    let sy = image.height as f64 / target as f64;
    let sx = image.width as f64 / target as f64;
    let mut out = ImageTensor::zeros(target, target);
    for y in 0..target {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, image.height as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..target {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, image.width as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let top = image.get(y0, x0, c) * (1.0 - wx) + image.get(y0, x1, c) * wx;
                let bottom = image.get(y1, x0, c) * (1.0 - wx) + image.get(y1, x1, c) * wx;
                out.set(y, x, c, top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    out
}

/// Black-pad to square, then resample to `target x target`. The content
/// aspect ratio is preserved by construction.
pub fn pad_and_resize(image: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::Data("cannot preprocess an empty image".into()));
    }
    Ok(resize_bilinear(&pad_to_square(image), target))
}

pub fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    let mut out = ImageTensor::zeros(image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.set(y, x, c, image.get(y, image.width - 1 - x, c));
            }
        }
    }
    out
}

/// Crop margin used by [`augment`].
pub const CROP_MARGIN: usize = 8;

/// Training augmentation: pad `CROP_MARGIN` black pixels on every side,
/// crop back to the original size at a seeded random offset, and flip
/// horizontally with probability one half. Deterministic in `seed`.
pub fn augment(image: &ImageTensor, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.height, image.width);
    let dy = rng.random_range(0..=2 * CROP_MARGIN);
    let dx = rng.random_range(0..=2 * CROP_MARGIN);
    let flip = rng.random_bool(0.5);

    let mut out = ImageTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            // Source coordinates inside the padded canvas.
            let py = y + dy;
            let px = x + dx;
            for c in 0..3 {
                let v = if py >= CROP_MARGIN
                    && py < CROP_MARGIN + h
                    && px >= CROP_MARGIN
                    && px < CROP_MARGIN + w
                {
                    image.get(py - CROP_MARGIN, px - CROP_MARGIN, c)
                } else {
                    0.0
                };
                out.set(y, x, c, v);
            }
        }
    }
    if flip {
        flip_horizontal(&out)
    } else {
        out
    }
}
