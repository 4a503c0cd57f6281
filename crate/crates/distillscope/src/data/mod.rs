//! Image ingestion, preprocessing, augmentation, and the seeded synthetic
//! dataset with planted ground-truth regions.

mod augment;
mod ppm;
mod synthetic;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use ppm::{read_ppm, read_raw_tensor, write_ppm};
pub use synthetic::{make_synthetic, region_probe_accuracy, SyntheticConfig};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// ImageNet channel statistics used for normalization.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Integer pixel bounding box, inclusive of `x0,y0`, exclusive of `x1,y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// 8-bit RGB image with label and split tag.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Vec<u8>, // H*W*3, row-major, interleaved RGB
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub split: Split,
    /// Ground-truth region, synthetic data only.
    pub region: Option<Region>,
}

impl ImageSample {
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// On-disk manifest: {classes, splits, image_size, mean, std}.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
    pub image_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

/// Loaded dataset: per-split sample lists in stable (lexicographic) order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub image_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Non-fatal findings surfaced during load (e.g. empty splits).
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Per-channel mean pixel value (0-255 scale) over the train split.
    pub fn pixel_mean(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for s in &self.train {
            for px in s.pixels.chunks(3) {
                sums[0] += px[0] as f64;
                sums[1] += px[1] as f64;
                sums[2] += px[2] as f64;
            }
            count += s.pixels.len() / 3;
        }
        if count == 0 {
            return [0.0; 3];
        }
        [
            sums[0] / count as f64,
            sums[1] / count as f64,
            sums[2] / count as f64,
        ]
    }
}

/// Loads a manifest plus every image it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::Load {
        path: manifest_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: manifest_path.display().to_string(),
        msg: format!("manifest parse error: {e}"),
    })?;
    if manifest.classes.len() < 2 {
        return Err(Error::Config(format!(
            "manifest must declare at least 2 classes, got {}",
            manifest.classes.len()
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    // Ground-truth regions, when the `regions.json` sidecar exists.
    let regions: BTreeMap<String, Region> = match std::fs::read_to_string(base.join("regions.json"))
    {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Load {
            path: base.join("regions.json").display().to_string(),
            msg: format!("regions parse error: {e}"),
        })?,
        Err(_) => BTreeMap::new(),
    };
    let mut dataset = Dataset {
        classes: manifest.classes.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        image_size: manifest.image_size,
        mean: manifest.mean,
        std: manifest.std,
        warnings: Vec::new(),
    };
    for split in Split::ALL {
        let mut entries = manifest
            .splits
            .get(split.name())
            .cloned()
            .unwrap_or_default();
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        if entries.is_empty() {
            dataset
                .warnings
                .push(format!("split '{}' is empty", split.name()));
        }
        for entry in entries {
            if entry.label >= manifest.classes.len() {
                return Err(Error::Load {
                    path: entry.path.clone(),
                    msg: format!(
                        "label {} out of range for {} classes",
                        entry.label,
                        manifest.classes.len()
                    ),
                });
            }
            let full: PathBuf = base.join(&entry.path);
            let (pixels, h, w) = load_image(&full)?;
            let samples = match split {
                Split::Train => &mut dataset.train,
                Split::Val => &mut dataset.val,
                Split::Test => &mut dataset.test,
            };
            samples.push(ImageSample {
                pixels,
                height: h,
                width: w,
                label: entry.label,
                split,
                region: regions.get(&entry.path).copied(),
            });
        }
    }
    Ok(dataset)
}

fn load_image(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => read_ppm(path),
        "raw" | "f32" | "bin" => read_raw_tensor(path),
        other => Err(Error::Load {
            path: path.display().to_string(),
            msg: format!("unsupported image format '{other}' (expected .ppm or raw tensor)"),
        }),
    }
}

/// Bilinear resize of an interleaved RGB u8 image to `size x size`,
/// returned as f64 in [0, 255].
pub fn resize_bilinear(pixels: &[u8], h: usize, w: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; size * size * 3];
    if size == h && size == w {
        for (o, &p) in out.iter_mut().zip(pixels) {
            *o = p as f64;
        }
        return out;
    }
    // Align corners = false convention: sample at pixel centers.
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| pixels[(yy * w + xx) * 3 + c] as f64;
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[(y * size + x) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Resize, scale to [0,1], and normalize per channel. Output layout is
/// `[3, size, size]`.
pub fn preprocess<F: Scalar>(
    sample: &ImageSample,
    size: usize,
    mean: &[f64; 3],
    std: &[f64; 3],
) -> Tensor<F> {
    let resized = resize_bilinear(&sample.pixels, sample.height, sample.width, size);
    let mut data = vec![F::zero(); 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let v = resized[(y * size + x) * 3 + c] / 255.0;
                data[c * size * size + y * size + x] = F::c((v - mean[c]) / std[c]);
            }
        }
    }
    Tensor::new(&[3, size, size], data)
}

/// Inverse of the normalization step, for round-trip checks and overlays.
pub fn denormalize<F: Scalar>(tensor: &Tensor<F>, mean: &[f64; 3], std: &[f64; 3]) -> Vec<f64> {
    let shape = tensor.shape();
    let (s2, s3) = (shape[1], shape[2]);
    let d = tensor.data();
    let mut out = vec![0.0f64; s2 * s3 * 3];
    for c in 0..3 {
        for i in 0..s2 * s3 {
            out[i * 3 + c] = (d[c * s2 * s3 + i].f64() * std[c] + mean[c]) * 255.0;
        }
    }
    out
}

/// Writes a dataset to `dir` as PPM files plus `manifest.json`, and a
/// `regions.json` sidecar when ground-truth regions exist.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut splits: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
    let mut regions: BTreeMap<String, Region> = BTreeMap::new();
    for split in Split::ALL {
        let mut entries = Vec::new();
        for (i, sample) in dataset.split(split).iter().enumerate() {
            let rel = format!("{}/{:04}_c{}.ppm", split.name(), i, sample.label);
            let full = dir.join(&rel);
            std::fs::create_dir_all(full.parent().unwrap())?;
            write_ppm(&full, &sample.pixels, sample.height, sample.width)?;
            if let Some(r) = sample.region {
                regions.insert(rel.clone(), r);
            }
            entries.push(ManifestEntry {
                path: rel,
                label: sample.label,
            });
        }
        splits.insert(split.name().to_string(), entries);
    }
    let manifest = DatasetManifest {
        classes: dataset.classes.clone(),
        splits,
        image_size: dataset.image_size,
        mean: dataset.mean,
        std: dataset.std,
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    if !regions.is_empty() {
        std::fs::write(
            dir.join("regions.json"),
            serde_json::to_string_pretty(&regions)?,
        )?;
    }
    Ok(manifest_path)
}

/// Deterministic batch index order for one epoch.
pub fn shuffled_indices(n: usize, rng: &mut crate::tensor::rng::Rng) -> Rc<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Rc::new(idx)
}
