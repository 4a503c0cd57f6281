//! Seeded synthetic dataset: each class is a Gaussian blob planted in a
//! class-specific sub-region with a class-specific stripe frequency over
//! noise, so saliency methods have a ground truth to localize.

use super::{Dataset, ImageSample, Region, Split, IMAGENET_MEAN, IMAGENET_STD};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::rng::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub side: usize,
    /// Samples per class in (train, val, test).
    pub per_class: (usize, usize, usize),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        // 200 per class at a 70:15:15 split.
        SyntheticConfig {
            classes: 4,
            side: 32,
            per_class: (140, 30, 30),
        }
    }
}

impl SyntheticConfig {
    pub fn with_total_per_class(mut self, total: usize) -> Self {
        let train = (total as f64 * 0.70).round() as usize;
        let val = (total as f64 * 0.15).round() as usize;
        self.per_class = (train, val, total - train - val);
        self
    }
}

/// Class-specific blob center as a fraction of the image side. The first
/// four classes sit in the four quadrants; later classes use edge midpoints.
fn class_center(class: usize) -> (f64, f64) {
    const CENTERS: [(f64, f64); 8] = [
        (0.28, 0.28),
        (0.72, 0.28),
        (0.28, 0.72),
        (0.72, 0.72),
        (0.50, 0.25),
        (0.25, 0.50),
        (0.75, 0.50),
        (0.50, 0.75),
    ];
    CENTERS[class % 8]
}

/// Builds the dataset. Deterministic in `seed`: identical seeds produce
/// byte-identical datasets.
pub fn make_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    if !(2..=8).contains(&cfg.classes) {
        return Err(Error::Config(format!(
            "synthetic class count must be in [2,8], got {}",
            cfg.classes
        )));
    }
    if cfg.side < 16 {
        return Err(Error::Config(format!(
            "synthetic side must be >= 16, got {}",
            cfg.side
        )));
    }
    let mut dataset = Dataset {
        classes: (0..cfg.classes).map(|c| format!("class_{c}")).collect(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        image_size: cfg.side,
        mean: IMAGENET_MEAN,
        std: IMAGENET_STD,
        warnings: Vec::new(),
    };
    for (split, count) in [
        (Split::Train, cfg.per_class.0),
        (Split::Val, cfg.per_class.1),
        (Split::Test, cfg.per_class.2),
    ] {
        for class in 0..cfg.classes {
            // Distinct stream per (split, class) keeps generation stable
            // under count changes elsewhere.
            let stream = (split as u64) << 8 | class as u64;
            let mut rng = Rng::new(seed, stream);
            for _ in 0..count {
                let sample = render_sample(class, split, cfg.side, &mut rng);
                match split {
                    Split::Train => dataset.train.push(sample),
                    Split::Val => dataset.val.push(sample),
                    Split::Test => dataset.test.push(sample),
                }
            }
        }
    }
    Ok(dataset)
}

fn render_sample(class: usize, split: Split, side: usize, rng: &mut Rng) -> ImageSample {
    let s = side as f64;
    let (fx, fy) = class_center(class);
    let cx = fx * s + rng.uniform(-0.04, 0.04) * s;
    let cy = fy * s + rng.uniform(-0.04, 0.04) * s;
    let sigma = s * rng.uniform(0.085, 0.11);
    let amplitude = rng.uniform(150.0, 185.0);
    let stripe_freq = (class + 1) as f64;
    let phase = rng.uniform(0.0, std::f64::consts::TAU);

    let mut pixels = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let noise = rng.uniform(15.0, 70.0);
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let blob = amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let stripes =
                0.75 + 0.25 * (std::f64::consts::TAU * stripe_freq * x as f64 / s + phase).sin();
            let v = noise + blob * stripes;
            let o = (y * side + x) * 3;
            // Slight per-channel tint so RGB channels stay informative.
            pixels[o] = (v * 1.00).clamp(0.0, 255.0) as u8;
            pixels[o + 1] = (v * 0.92).clamp(0.0, 255.0) as u8;
            pixels[o + 2] = (v * 0.84).clamp(0.0, 255.0) as u8;
        }
    }

    let r = 2.5 * sigma;
    let region = Region {
        x0: (cx - r).floor().max(0.0) as usize,
        y0: (cy - r).floor().max(0.0) as usize,
        x1: ((cx + r).ceil() as usize + 1).min(side),
        y1: ((cy + r).ceil() as usize + 1).min(side),
    };
    ImageSample {
        pixels,
        height: side,
        width: side,
        label: class,
        split,
        region: Some(region),
    }
}

/// Least-squares one-vs-rest probe on quadrant-mean intensities; returns
/// train accuracy. A separable dataset scores near 1.0.
pub fn region_probe_accuracy(dataset: &Dataset) -> Result<f64> {
    let k = dataset.num_classes();
    let n = dataset.train.len();
    if n == 0 {
        return Err(Error::Config("probe needs a train split".into()));
    }
    let p = 13; // 4 quadrants x 3 channels + intercept
    let mut x = Vec::with_capacity(n * p);
    for sample in &dataset.train {
        x.extend_from_slice(&quadrant_features(sample));
        x.push(1.0);
    }
    let weights = vec![1.0; n];
    let mut scores = vec![0.0f64; n * k];
    for class in 0..k {
        let y: Vec<f64> = dataset
            .train
            .iter()
            .map(|s| if s.label == class { 1.0 } else { 0.0 })
            .collect();
        let beta = linalg::weighted_ridge(&x, &y, &weights, n, p, 1e-6, &[p - 1])?;
        for i in 0..n {
            scores[i * k + class] = x[i * p..(i + 1) * p]
                .iter()
                .zip(&beta)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let correct = dataset
        .train
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            let row = &scores[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            pred == s.label
        })
        .count();
    Ok(correct as f64 / n as f64)
}

fn quadrant_features(sample: &ImageSample) -> [f64; 12] {
    let (h, w) = (sample.height, sample.width);
    let mut sums = [0.0f64; 12];
    let mut counts = [0usize; 4];
    for y in 0..h {
        for x in 0..w {
            let q = (y >= h / 2) as usize * 2 + (x >= w / 2) as usize;
            let rgb = sample.rgb(x, y);
            for c in 0..3 {
                sums[q * 3 + c] += rgb[c] as f64;
            }
            counts[q] += 1;
        }
    }
    let mut out = [0.0f64; 12];
    for q in 0..4 {
        for c in 0..3 {
            out[q * 3 + c] = sums[q * 3 + c] / counts[q] as f64 / 255.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            classes: 4,
            side: 32,
            per_class: (16, 4, 4),
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = make_synthetic(7, &small_cfg()).unwrap();
        let b = make_synthetic(7, &small_cfg()).unwrap();
        for (sa, sb) in a.train.iter().zip(&b.train) {
            assert_eq!(sa.pixels, sb.pixels);
            assert_eq!(sa.region, sb.region);
        }
    }

    #[test]
    fn regions_inside_bounds() {
        let ds = make_synthetic(11, &small_cfg()).unwrap();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let r = s.region.unwrap();
            assert!(r.x0 < r.x1 && r.x1 <= s.width);
            assert!(r.y0 < r.y1 && r.y1 <= s.height);
        }
    }

    #[test]
    fn classes_are_linearly_separable_on_region_means() {
        let ds = make_synthetic(13, &SyntheticConfig::default()).unwrap();
        let acc = region_probe_accuracy(&ds).unwrap();
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn default_split_ratio_is_70_15_15() {
        let cfg = SyntheticConfig::default().with_total_per_class(200);
        assert_eq!(cfg.per_class, (140, 30, 30));
    }

    #[test]
    fn class_count_bounds_enforced() {
        let mut cfg = small_cfg();
        cfg.classes = 1;
        assert!(make_synthetic(1, &cfg).is_err());
        cfg.classes = 9;
        assert!(make_synthetic(1, &cfg).is_err());
    }
}
