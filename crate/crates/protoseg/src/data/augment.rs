//! Random augmentation pipeline: resized crop, horizontal flip, color
//! jitter, grayscale conversion, blur. Geometric ops move the image and
//! mask identically (nearest-neighbor resampling for both); photometric
//! ops touch the image only. Output resolution always equals the input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Mask, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub crop_prob: f64,
    /// Lower bound on the cropped side as a fraction of the original.
    pub crop_min_scale: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Maximum relative strength of brightness/contrast jitter.
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_prob: 0.5,
            crop_min_scale: 0.6,
            flip_prob: 0.5,
            jitter_prob: 0.5,
            jitter_strength: 0.2,
            grayscale_prob: 0.5,
            blur_prob: 0.5,
        }
    }
}

impl AugConfig {
    /// All probabilities zero: augment becomes the identity.
    pub fn disabled() -> Self {
        AugConfig {
            crop_prob: 0.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..AugConfig::default()
        }
    }
}

/// Apply the augmentation pipeline to an image and its mask.
pub fn augment(
    image: &Tensor,
    mask: &Mask,
    cfg: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Mask) {
    let (h, w) = (mask.height(), mask.width());
    assert_eq!(image.shape(), &[3, h, w]);
    let mut img = image.clone();
    let mut msk = mask.clone();

    if rng.random_range(0.0..1.0) < cfg.crop_prob {
        let scale = rng.random_range(cfg.crop_min_scale..1.0);
        let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        (img, msk) = crop_resize(&img, &msk, top, left, ch, cw);
    }
    if rng.random_range(0.0..1.0) < cfg.flip_prob {
        img = flip_image(&img);
        msk = msk.flip_horizontal();
    }
    if rng.random_range(0.0..1.0) < cfg.jitter_prob {
        let s = cfg.jitter_strength;
        let scales: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0 - s..1.0 + s));
        let shift = rng.random_range(-s / 2.0..s / 2.0);
        let n = h * w;
        let data = img.data_mut();
        for ch in 0..3 {
            for v in data[ch * n..(ch + 1) * n].iter_mut() {
                *v = (*v * scales[ch] + shift).clamp(0.0, 1.0);
            }
        }
    }
    if rng.random_range(0.0..1.0) < cfg.grayscale_prob {
        let n = h * w;
        let data = img.data_mut();
        for p in 0..n {
            let lum = 0.299 * data[p] + 0.587 * data[n + p] + 0.114 * data[2 * n + p];
            data[p] = lum;
            data[n + p] = lum;
            data[2 * n + p] = lum;
        }
    }
    if rng.random_range(0.0..1.0) < cfg.blur_prob {
        img = blur3(&img);
    }
    (img, msk)
}

/// Crop a window and resize it back to the original resolution with
/// nearest-neighbor sampling, identically for image and mask.
fn crop_resize(
    image: &Tensor,
    mask: &Mask,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> (Tensor, Mask) {
    let (h, w) = (mask.height(), mask.width());
    let n = h * w;
    let mut out_img = Tensor::zeros(&[3, h, w]);
    let mut out_mask = Mask::zeros(h, w);
    let src = image.data();
    let dst = out_img.data_mut();
    for y in 0..h {
        let sy = top + ((y as f64 + 0.5) * ch as f64 / h as f64) as usize;
        let sy = sy.min(top + ch - 1);
        for x in 0..w {
            let sx = left + ((x as f64 + 0.5) * cw as f64 / w as f64) as usize;
            let sx = sx.min(left + cw - 1);
            for c in 0..3 {
                dst[c * n + y * w + x] = src[c * n + sy * w + sx];
            }
            out_mask.set(y, x, mask.get(sy, sx));
        }
    }
    (out_img, out_mask)
}

fn flip_image(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut out = image.clone();
    let src = image.data();
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                dst[c * n + y * w + x] = src[c * n + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// 3x3 binomial blur with clamped edges.
fn blur3(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut out = image.clone();
    let src = image.data();
    let dst = out.data_mut();
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, ky) in K.iter().enumerate() {
                    let sy = (y + dy).saturating_sub(1).min(h - 1);
                    for (dx, kx) in K.iter().enumerate() {
                        let sx = (x + dx).saturating_sub(1).min(w - 1);
                        acc += ky * kx * src[c * n + sy * w + sx];
                    }
                }
                dst[c * n + y * w + x] = acc;
            }
        }
    }
    out
}
