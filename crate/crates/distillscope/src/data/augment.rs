//! Training-time augmentation: horizontal flip, small rotations, and mild
//! affine jitter, all label-preserving and seeded.

use super::ImageSample;
use crate::tensor::rng::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_range: (f64, f64),
    pub shear_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            rotation_deg: 10.0,
            translate_frac: 0.05,
            scale_range: (0.95, 1.05),
            shear_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    pub translate: (f64, f64), // pixels
    pub scale: f64,
    pub shear_deg: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
            shear_deg: 0.0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, side: usize, rng: &mut Rng) -> Self {
        let t = cfg.translate_frac * side as f64;
        AugmentParams {
            flip: rng.chance(cfg.flip_p),
            rotation_deg: rng.uniform(-cfg.rotation_deg, cfg.rotation_deg),
            translate: (rng.uniform(-t, t), rng.uniform(-t, t)),
            scale: rng.uniform(cfg.scale_range.0, cfg.scale_range.1),
            shear_deg: rng.uniform(-cfg.shear_deg, cfg.shear_deg),
        }
    }
}

/// Applies a seeded augmentation. Intended for train-split samples only;
/// the training loop never calls this on val/test data.
pub fn augment(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut Rng) -> ImageSample {
    let params = AugmentParams::sample(cfg, sample.width.max(sample.height), rng);
    apply(sample, &params)
}

/// Applies explicit parameters (bilinear resampling, edge-replicate fill).
pub fn apply(sample: &ImageSample, params: &AugmentParams) -> ImageSample {
    let (h, w) = (sample.height, sample.width);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    // Forward map: flip -> scale -> shear -> rotate -> translate, about
    // the image center. We invert it to pull source coordinates.
    let theta = params.rotation_deg.to_radians();
    let phi = params.shear_deg.to_radians();
    let s = params.scale;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    // A = R(theta) * Shear(phi) * S(s); Shear acts on x by y*tan(phi).
    let tan_p = phi.tan();
    let a00 = cos_t * s - sin_t * 0.0;
    let a01 = cos_t * s * tan_p - sin_t * s;
    let a10 = sin_t * s + cos_t * 0.0;
    let a11 = sin_t * s * tan_p + cos_t * s;
    let det = a00 * a11 - a01 * a10;
    // Inverse of A.
    let i00 = a11 / det;
    let i01 = -a01 / det;
    let i10 = -a10 / det;
    let i11 = a00 / det;

    let mut out = vec![0u8; sample.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - params.translate.0;
            let dy = y as f64 - cy - params.translate.1;
            let mut sx = i00 * dx + i01 * dy + cx;
            let sy = i10 * dx + i11 * dy + cy;
            if params.flip {
                sx = (w as f64 - 1.0) - sx;
            }
            let rgb = sample_bilinear(sample, sx, sy);
            let o = (y * w + x) * 3;
            out[o..o + 3].copy_from_slice(&rgb);
        }
    }
    ImageSample {
        pixels: out,
        height: h,
        width: w,
        label: sample.label,
        split: sample.split,
        region: sample.region,
    }
}

fn sample_bilinear(sample: &ImageSample, x: f64, y: f64) -> [u8; 3] {
    let (h, w) = (sample.height as isize, sample.width as isize);
    // Edge-replicate fill: clamp the sampling coordinates.
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(sample.width - 1);
    let y1 = (y0 + 1).min(sample.height - 1);
    let wx = x - x0 as f64;
    let wy = y - y0 as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let at = |yy: usize, xx: usize| sample.pixels[(yy * sample.width + xx) * 3 + c] as f64;
        let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
        let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
        rgb[c] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn noisy_sample(side: usize, seed: u64) -> ImageSample {
        let mut rng = Rng::new(seed, 0);
        ImageSample {
            pixels: (0..side * side * 3).map(|_| rng.below(256) as u8).collect(),
            height: side,
            width: side,
            label: 1,
            split: Split::Train,
            region: None,
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let sample = noisy_sample(16, 1);
        let mut params = AugmentParams::identity();
        params.flip = true;
        let once = apply(&sample, &params);
        let twice = apply(&once, &params);
        assert_eq!(twice.pixels, sample.pixels);
        assert_ne!(once.pixels, sample.pixels);
    }

    #[test]
    fn identity_params_are_identity() {
        let sample = noisy_sample(16, 2);
        let out = apply(&sample, &AugmentParams::identity());
        assert_eq!(out.pixels, sample.pixels);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let sample = noisy_sample(16, 3);
        let cfg = AugmentConfig::default();
        let a = augment(&sample, &cfg, &mut Rng::new(99, 0));
        let b = augment(&sample, &cfg, &mut Rng::new(99, 0));
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn label_and_shape_preserved() {
        let sample = noisy_sample(16, 4);
        let out = augment(&sample, &AugmentConfig::default(), &mut Rng::new(5, 0));
        assert_eq!(out.label, sample.label);
        assert_eq!((out.height, out.width), (sample.height, sample.width));
        assert_eq!(out.pixels.len(), sample.pixels.len());
    }
}
