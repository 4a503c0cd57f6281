//! Explainability: Grad-CAM, Grad-CAM++, Score-CAM, and LIME-style
//! superpixel explanations over recorded token grids, plus overlay
//! rendering.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ActivationRecord, Model};
use crate::tensor::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Batched forward hook returning one logit vector per image. The serial
/// form is `Model::logits_batch`; callers may substitute a threaded
/// implementation as long as output order matches input order.
pub type BatchFn<'a, F> = dyn Fn(&[Tensor<F>]) -> Result<Vec<Vec<f64>>> + 'a;

impl<F: Scalar> Model<F> {
    /// Serial reference implementation of the batched forward.
    pub fn logits_batch(&self, images: &[Tensor<F>]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|im| Ok(self.forward(im)?.0.to_f64_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SaliencyMap {
    pub method: String,
    pub class_index: usize,
    /// Grid resolution of the raw map (token grid, or the LIME region grid).
    pub grid_h: usize,
    pub grid_w: usize,
    /// Raw grid values: non-negative CAM activations, or signed LIME
    /// region coefficients.
    pub raw: Vec<f64>,
    /// Per-channel weights (CAMs) or per-region coefficients (LIME).
    pub weights: Vec<f64>,
    /// Normalized [0,1] map at input resolution.
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// True when the map vanished (e.g. all gradients negative).
    pub all_zero: bool,
    pub warnings: Vec<String>,
    /// Surrogate-model intercept (LIME only).
    pub intercept: Option<f64>,
}

// ---------------------------------------------------------------- helpers

/// Bilinear upsampling with pixel-center alignment, matching the image
/// resize used in preprocessing.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[y * out_w + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

fn min_max_normalize(values: &mut [f64]) -> bool {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    values.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
    true
}

/// Activation matrix `[h*w, C]` with the class token dropped, plus grid
/// dims, as plain floats.
fn feature_grid<F: Scalar>(record: &ActivationRecord<F>) -> (Vec<f64>, usize, usize, usize) {
    let shape = record.tokens.shape();
    let c = shape[1];
    let data = record.tokens.to_f64_vec();
    let start = if record.has_class_token { c } else { 0 };
    (data[start..].to_vec(), record.grid_h, record.grid_w, c)
}

fn pick_record<'a, F: Scalar>(
    records: &'a [ActivationRecord<F>],
    layer: Option<&str>,
) -> Result<&'a ActivationRecord<F>> {
    match layer {
        None => records.last().ok_or_else(|| {
            Error::Config("model produced no activation records".into())
        }),
        Some(name) => records.iter().find(|r| r.name == name).ok_or_else(|| {
            let known: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
            Error::Config(format!("unknown layer '{name}'; available: {known:?}"))
        }),
    }
}

/// Builds the final saliency map from a raw (pre-ReLU) grid combination.
fn finish_cam(
    method: &str,
    class_index: usize,
    mut raw: Vec<f64>,
    grid_h: usize,
    grid_w: usize,
    height: usize,
    width: usize,
    weights: Vec<f64>,
    warnings: Vec<String>,
) -> SaliencyMap {
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut map = upsample_bilinear(&raw, grid_h, grid_w, height, width);
    let nonzero = min_max_normalize(&mut map);
    SaliencyMap {
        method: method.to_string(),
        class_index,
        grid_h,
        grid_w,
        raw,
        weights,
        map,
        height,
        width,
        all_zero: !nonzero,
        warnings,
        intercept: None,
    }
}

/// Runs a forward pass, backpropagates the class logit, and returns the
/// activations `A` and gradients `dy_c/dA` for the selected layer.
fn activation_and_grad<F: Scalar>(
    model: &Model<F>,
    image: &Tensor<F>,
    class_index: usize,
    layer: Option<&str>,
) -> Result<(Vec<f64>, Vec<f64>, usize, usize, usize)> {
    let params = model.params();
    let flags: Vec<bool> = params.iter().map(|(_, t)| t.requires_grad()).collect();
    // Gradients must flow to the activation records even for frozen or
    // loaded-for-eval weights.
    params.set_requires_grad(true);
    let run = || -> Result<(Vec<f64>, Vec<f64>, usize, usize, usize)> {
        let (logits, acts) = model.forward(image)?;
        let k = logits.len();
        if class_index >= k {
            return Err(Error::IndexOutOfRange {
                index: class_index,
                limit: k,
            });
        }
        logits.slice(0, class_index, 1)?.sum_all().backward()?;
        let record = pick_record(&acts.records, layer)?;
        let (a, h, w, c) = feature_grid(record);
        let full_grad = record.tokens.grad().ok_or_else(|| {
            Error::Config("no gradient reached the activation record".into())
        })?;
        let start = if record.has_class_token { c } else { 0 };
        let g: Vec<f64> = full_grad[start..].iter().map(|v| v.f64()).collect();
        Ok((a, g, h, w, c))
    };
    let result = run();
    for ((_, t), flag) in params.iter().zip(flags) {
        t.set_requires_grad(flag);
    }
    params.zero_grads();
    result
}

// --------------------------------------------------------------- grad-cam

/// Channel weights are global-average-pooled gradients; the map is the
/// rectified weighted channel sum.
pub fn grad_cam<F: Scalar>(
    model: &Model<F>,
    image: &Tensor<F>,
    class_index: usize,
    layer: Option<&str>,
) -> Result<SaliencyMap> {
    let (a, g, h, w, c) = activation_and_grad(model, image, class_index, layer)?;
    let z = (h * w) as f64;
    let mut alpha = vec![0.0f64; c];
    for i in 0..h * w {
        for k in 0..c {
            alpha[k] += g[i * c + k] / z;
        }
    }
    let mut raw = vec![0.0f64; h * w];
    for i in 0..h * w {
        for k in 0..c {
            raw[i] += alpha[k] * a[i * c + k];
        }
    }
    let (height, width) = (image.shape()[1], image.shape()[2]);
    Ok(finish_cam(
        "gradcam",
        class_index,
        raw,
        h,
        w,
        height,
        width,
        alpha,
        Vec::new(),
    ))
}

// ------------------------------------------------------------- grad-cam++

/// Closed-form pixel weights using first derivatives only:
/// `alpha_ij = g_ij^2 / (2 g_ij^2 + sum_ab A_ab g_ab^3 + eps)`.
pub fn grad_cam_pp<F: Scalar>(
    model: &Model<F>,
    image: &Tensor<F>,
    class_index: usize,
    layer: Option<&str>,
) -> Result<SaliencyMap> {
    let (a, g, h, w, c) = activation_and_grad(model, image, class_index, layer)?;
    let n = h * w;
    let mut weights = vec![0.0f64; c];
    for k in 0..c {
        let sum_ag3: f64 = (0..n).map(|i| a[i * c + k] * g[i * c + k].powi(3)).sum();
        for i in 0..n {
            let gi = g[i * c + k];
            let denom = 2.0 * gi * gi + sum_ag3 + 1e-8;
            let alpha_ij = gi * gi / denom;
            weights[k] += alpha_ij * gi.max(0.0);
        }
    }
    let mut raw = vec![0.0f64; n];
    for i in 0..n {
        for k in 0..c {
            raw[i] += weights[k] * a[i * c + k];
        }
    }
    let (height, width) = (image.shape()[1], image.shape()[2]);
    Ok(finish_cam(
        "gradcampp",
        class_index,
        raw,
        h,
        w,
        height,
        width,
        weights,
        Vec::new(),
    ))
}

// -------------------------------------------------------------- score-cam

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Gradient-free CAM: channels weighted by the class-probability change
/// their upsampled activation causes when used as an input mask.
pub fn score_cam<F: Scalar>(
    model: &Model<F>,
    image: &Tensor<F>,
    class_index: usize,
    layer: Option<&str>,
    top_k: usize,
    batch: &BatchFn<'_, F>,
) -> Result<SaliencyMap> {
    let (logits, acts) = model.forward(image)?;
    if class_index >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: class_index,
            limit: logits.len(),
        });
    }
    let record = pick_record(&acts.records, layer)?;
    let (a, h, w, c) = feature_grid(record);
    let mut warnings = Vec::new();
    let k = if top_k > c {
        warnings.push(format!(
            "requested top {top_k} channels but the layer has {c}; using all"
        ));
        c
    } else {
        top_k
    };
    // Top-K channels by spatial L2 energy.
    let mut energy: Vec<(usize, f64)> = (0..c)
        .map(|ch| (ch, (0..h * w).map(|i| a[i * c + ch].powi(2)).sum()))
        .collect();
    energy.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    let selected: Vec<usize> = energy[..k].iter().map(|e| e.0).collect();

    let (height, width) = (image.shape()[1], image.shape()[2]);
    let image_data = image.to_f64_vec();
    let mut probes = Vec::with_capacity(k + 1);
    // Baseline: the all-zero normalized input.
    probes.push(Tensor::new(&[3, height, width], vec![F::zero(); 3 * height * width]));
    for &ch in &selected {
        let mut grid: Vec<f64> = (0..h * w).map(|i| a[i * c + ch]).collect();
        min_max_normalize(&mut grid);
        let mask = upsample_bilinear(&grid, h, w, height, width);
        let mut masked = vec![F::zero(); 3 * height * width];
        for ci in 0..3 {
            for p in 0..height * width {
                let idx = ci * height * width + p;
                masked[idx] = F::c(image_data[idx] * mask[p]);
            }
        }
        probes.push(Tensor::new(&[3, height, width], masked));
    }
    let outputs = batch(&probes)?;
    if outputs.len() != probes.len() {
        return Err(Error::Config(format!(
            "batched forward returned {} outputs for {} inputs",
            outputs.len(),
            probes.len()
        )));
    }
    let baseline = softmax_f64(&outputs[0])[class_index];
    let increases: Vec<f64> = outputs[1..]
        .iter()
        .map(|l| softmax_f64(l)[class_index] - baseline)
        .collect();
    let channel_weights = softmax_f64(&increases);

    let mut raw = vec![0.0f64; h * w];
    for (wi, &ch) in channel_weights.iter().zip(&selected) {
        for i in 0..h * w {
            raw[i] += wi * a[i * c + ch];
        }
    }
    // Report weights aligned to channel indices for the sidecar.
    let mut weights = vec![0.0f64; c];
    for (wi, &ch) in channel_weights.iter().zip(&selected) {
        weights[ch] = *wi;
    }
    Ok(finish_cam(
        "scorecam",
        class_index,
        raw,
        h,
        w,
        height,
        width,
        weights,
        warnings,
    ))
}

// ------------------------------------------------------------------- lime

/// Pad-aware regular grid: region `r` covers pixel rows
/// `[bounds[r], bounds[r+1])`.
fn grid_bounds(len: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|i| i * len / cells).collect()
}

pub struct LimeConfig {
    pub grid: usize,
    pub samples: usize,
    pub ridge_lambda: f64,
    /// Kernel width of the proximity weight exp(-(1-s)^2 / width^2).
    pub kernel_width: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            grid: 4,
            samples: 200,
            ridge_lambda: 1e-3,
            kernel_width: 0.25,
        }
    }
}

/// Local linear surrogate over Bernoulli(0.5) region masks. `fill` is the
/// per-channel dataset mean in the model's normalized input space.
pub fn lime_explain<F: Scalar>(
    batch: &BatchFn<'_, F>,
    image: &Tensor<F>,
    class_index: usize,
    cfg: &LimeConfig,
    fill: &[f64; 3],
    rng: &mut Rng,
) -> Result<SaliencyMap> {
    let (height, width) = (image.shape()[1], image.shape()[2]);
    let r = cfg.grid;
    if r == 0 || r > height.min(width) {
        return Err(Error::Config(format!(
            "LIME grid {r} invalid for a {height}x{width} input"
        )));
    }
    let n = cfg.samples;
    let d = r * r;
    if n < d + 1 {
        return Err(Error::Config(format!(
            "LIME needs at least {} samples for a {r}x{r} grid, got {n}",
            d + 1
        )));
    }
    let ys = grid_bounds(height, r);
    let xs = grid_bounds(width, r);
    let image_data = image.to_f64_vec();

    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(n);
    let mut probes = Vec::with_capacity(n);
    for _ in 0..n {
        let bits: Vec<bool> = (0..d).map(|_| rng.chance(0.5)).collect();
        let mut data: Vec<F> = image_data.iter().map(|&v| F::c(v)).collect();
        for (region, &on) in bits.iter().enumerate() {
            if on {
                continue;
            }
            let (gy, gx) = (region / r, region % r);
            for y in ys[gy]..ys[gy + 1] {
                for x in xs[gx]..xs[gx + 1] {
                    for ci in 0..3 {
                        data[ci * height * width + y * width + x] = F::c(fill[ci]);
                    }
                }
            }
        }
        probes.push(Tensor::new(&[3, height, width], data));
        masks.push(bits);
    }
    let outputs = batch(&probes)?;
    let probs: Vec<f64> = outputs
        .iter()
        .map(|l| {
            if class_index >= l.len() {
                Err(Error::IndexOutOfRange {
                    index: class_index,
                    limit: l.len(),
                })
            } else {
                Ok(softmax_f64(l)[class_index])
            }
        })
        .collect::<Result<_>>()?;

    // Proximity kernel: cosine similarity of the mask to all-ones.
    let kernel: Vec<f64> = masks
        .iter()
        .map(|bits| {
            let on = bits.iter().filter(|&&b| b).count() as f64;
            let s = (on / d as f64).sqrt();
            (-(1.0 - s).powi(2) / cfg.kernel_width.powi(2)).exp()
        })
        .collect();

    // Design matrix: region bits plus an unpenalized intercept column.
    let p = d + 1;
    let mut x = Vec::with_capacity(n * p);
    for bits in &masks {
        x.extend(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        x.push(1.0);
    }
    let beta = match linalg::weighted_ridge(&x, &probs, &kernel, n, p, cfg.ridge_lambda, &[d]) {
        Ok(beta) => beta,
        Err(Error::Singular(_)) => {
            // One retry with a stiffer ridge before giving up.
            linalg::weighted_ridge(&x, &probs, &kernel, n, p, cfg.ridge_lambda * 10.0, &[d])?
        }
        Err(e) => return Err(e),
    };
    let coefficients = beta[..d].to_vec();
    let intercept = beta[d];

    // Positive coefficients, min-max normalized over the positives, painted
    // back into their regions.
    let positives: Vec<f64> = coefficients.iter().map(|&c| c.max(0.0)).collect();
    let max_pos = positives.iter().cloned().fold(0.0f64, f64::max);
    let min_pos = positives
        .iter()
        .cloned()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let mut map = vec![0.0f64; height * width];
    let all_zero = max_pos <= 0.0;
    if !all_zero {
        for (region, &v) in positives.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            let norm = if max_pos > min_pos {
                (v - min_pos) / (max_pos - min_pos)
            } else {
                1.0
            };
            let (gy, gx) = (region / r, region % r);
            for y in ys[gy]..ys[gy + 1] {
                for x in xs[gx]..xs[gx + 1] {
                    map[y * width + x] = norm;
                }
            }
        }
    }
    Ok(SaliencyMap {
        method: "lime".to_string(),
        class_index,
        grid_h: r,
        grid_w: r,
        raw: coefficients.clone(),
        weights: coefficients,
        map,
        height,
        width,
        all_zero,
        warnings: Vec::new(),
        intercept: Some(intercept),
    })
}

// ---------------------------------------------------------------- overlay

/// Alpha-blends the saliency map over an RGB image through a fixed
/// blue-to-red ramp. `rgb` is `height*width*3` bytes.
pub fn render_overlay(rgb: &[u8], map: &SaliencyMap, opacity: f64) -> Result<Vec<u8>> {
    let n = map.height * map.width;
    if rgb.len() != n * 3 {
        return Err(Error::Config(format!(
            "overlay image has {} bytes, expected {}",
            rgb.len(),
            n * 3
        )));
    }
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::Config(format!(
            "opacity must be in [0,1], got {opacity}"
        )));
    }
    let mut out = vec![0u8; n * 3];
    for p in 0..n {
        let v = map.map[p].clamp(0.0, 1.0);
        let ramp = [255.0 * v, 0.0, 255.0 * (1.0 - v)];
        for c in 0..3 {
            let base = rgb[p * 3 + c] as f64;
            out[p * 3 + c] = ((1.0 - opacity) * base + opacity * ramp[c])
                .round()
                .clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Student, StudentConfig};

    fn tiny_student() -> Student<f64> {
        let cfg = StudentConfig {
            image_size: 16,
            patch: 4,
            dim: 8,
            depth: 1,
            heads: 1,
            num_classes: 3,
            lora: None,
        };
        Student::build(&cfg, &mut Rng::new(31, 0)).unwrap()
    }

    fn random_image(seed: u64, side: usize) -> Tensor<f64> {
        let mut rng = Rng::new(seed, 77);
        Tensor::new(
            &[3, side, side],
            (0..3 * side * side).map(|_| rng.uniform(-1.5, 1.5)).collect(),
        )
    }

    #[test]
    fn upsample_preserves_constant_fields() {
        let up = upsample_bilinear(&[0.7; 16], 4, 4, 32, 32);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_identity_when_sizes_match() {
        let src: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(upsample_bilinear(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn grad_cam_map_is_normalized_and_input_sized() {
        let model = Model::Student(tiny_student());
        let image = random_image(1, 16);
        let sal = grad_cam(&model, &image, 0, None).unwrap();
        assert_eq!(sal.map.len(), 16 * 16);
        assert_eq!((sal.grid_h, sal.grid_w), (4, 4));
        assert!(sal.map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(sal.raw.iter().all(|&v| v >= 0.0));
        if !sal.all_zero {
            assert!(sal.map.iter().cloned().fold(0.0f64, f64::max) == 1.0);
        }
    }

    #[test]
    fn grad_cam_scale_invariance_of_argmax() {
        // Positive rescaling of the class head column scales alpha and the
        // logit together; the normalized map keeps its argmax. Pick a
        // (seed, class) whose map survives the ReLU.
        let (image, class) = (0..8)
            .flat_map(|seed| (0..3).map(move |c| (seed, c)))
            .map(|(seed, c)| (random_image(seed, 16), c))
            .find(|(image, c)| {
                !grad_cam(&Model::Student(tiny_student()), image, *c, None)
                    .unwrap()
                    .all_zero
            })
            .expect("no non-zero map found");
        let before = grad_cam(&Model::Student(tiny_student()), &image, class, None).unwrap();
        let scaled = tiny_student();
        scaled.params.get("student.head.w").unwrap().with_data_mut(|d| {
            // The class column of the [dim, 3] head scaled by 5.
            for row in 0..8 {
                d[row * 3 + class] *= 5.0;
            }
        });
        let after = grad_cam(&Model::Student(scaled), &image, class, None).unwrap();
        let argmax = |m: &[f64]| {
            m.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert!(!before.all_zero && !after.all_zero);
        assert_eq!(argmax(&before.map), argmax(&after.map));
    }

    #[test]
    fn grad_cam_pp_zero_gradients_give_zero_map() {
        // A class column of zeros yields zero gradient everywhere.
        let student = tiny_student();
        student.params.get("student.head.w").unwrap().with_data_mut(|d| {
            for row in 0..8 {
                d[row * 3 + 2] = 0.0;
            }
        });
        student.params.get("student.head.b").unwrap().with_data_mut(|d| d[2] = 0.0);
        let model = Model::Student(student);
        let sal = grad_cam_pp(&model, &random_image(3, 16), 2, None).unwrap();
        assert!(sal.all_zero);
        assert!(sal.map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cam_pp_map_shares_gradcam_contract() {
        let model = Model::Student(tiny_student());
        let image = random_image(4, 16);
        let sal = grad_cam_pp(&model, &image, 0, None).unwrap();
        assert_eq!(sal.map.len(), 256);
        assert!(sal.raw.iter().all(|&v| v >= 0.0));
        assert!(sal.map.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn score_cam_weights_sum_to_one() {
        let model = Model::Student(tiny_student());
        let image = random_image(5, 16);
        let serial: Box<BatchFn<'_, f64>> = Box::new(|imgs| model.logits_batch(imgs));
        let sal = score_cam(&model, &image, 1, None, 4, &serial).unwrap();
        let total: f64 = sal.weights.iter().sum();
        assert!((total - 1.0).abs() <= 1e-6, "weights sum to {total}");
        assert_eq!(sal.map.len(), 256);
        assert!(sal.raw.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn score_cam_clamps_excess_channels_with_warning() {
        let model = Model::Student(tiny_student());
        let image = random_image(6, 16);
        let serial: Box<BatchFn<'_, f64>> = Box::new(|imgs| model.logits_batch(imgs));
        let sal = score_cam(&model, &image, 0, None, 99, &serial).unwrap();
        assert_eq!(sal.warnings.len(), 1);
        // All 8 channels participate.
        assert!((sal.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn score_cam_constant_model_gives_uniform_weights() {
        let model = Model::Student(tiny_student());
        let image = random_image(7, 16);
        // A forward that ignores its input entirely.
        let constant: Box<BatchFn<'_, f64>> =
            Box::new(|imgs| Ok(vec![vec![0.3, -0.2, 0.9]; imgs.len()]));
        let sal = score_cam(&model, &image, 0, None, 4, &constant).unwrap();
        let active: Vec<f64> = sal.weights.iter().cloned().filter(|&w| w > 0.0).collect();
        assert_eq!(active.len(), 4);
        for w in &active {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn lime_grid_tiles_the_image_exactly() {
        assert_eq!(grid_bounds(16, 4), vec![0, 4, 8, 12, 16]);
        // Pad-aware for sizes the grid does not divide.
        let odd = grid_bounds(17, 4);
        assert_eq!(odd, vec![0, 4, 8, 12, 17]);
        let covered: usize = odd.windows(2).map(|w| w[1] - w[0]).sum();
        assert_eq!(covered, 17);
    }

    #[test]
    fn lime_is_deterministic_for_a_fixed_seed() {
        let model = Model::Student(tiny_student());
        let image = random_image(9, 16);
        let serial: Box<BatchFn<'_, f64>> = Box::new(|imgs| model.logits_batch(imgs));
        let cfg = LimeConfig {
            samples: 40,
            ..LimeConfig::default()
        };
        let a = lime_explain(&serial, &image, 0, &cfg, &[0.0; 3], &mut Rng::new(17, 0)).unwrap();
        let b = lime_explain(&serial, &image, 0, &cfg, &[0.0; 3], &mut Rng::new(17, 0)).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn lime_recovers_signs_of_a_planted_linear_model() {
        // Ground truth: logit difference is a linear function of region
        // mean intensities with known signs.
        let side = 16;
        let r = 4;
        let mut rng = Rng::new(19, 0);
        let coeffs: Vec<f64> = (0..r * r)
            .map(|i| if i % 2 == 0 { rng.uniform(0.5, 1.5) } else { rng.uniform(-1.5, -0.5) })
            .collect();
        let ys = grid_bounds(side, r);
        let xs = grid_bounds(side, r);
        let coeffs_for_fwd = coeffs.clone();
        let linear: Box<BatchFn<'_, f64>> = Box::new(move |imgs| {
            imgs.iter()
                .map(|im| {
                    let d = im.to_f64_vec();
                    let mut score = 0.0;
                    for region in 0..r * r {
                        let (gy, gx) = (region / r, region % r);
                        let mut sum = 0.0;
                        let mut count = 0.0;
                        for y in ys[gy]..ys[gy + 1] {
                            for x in xs[gx]..xs[gx + 1] {
                                sum += d[y * side + x];
                                count += 1.0;
                            }
                        }
                        score += coeffs_for_fwd[region] * sum / count;
                    }
                    Ok(vec![score, 0.0])
                })
                .collect()
        });
        let image = Tensor::new(&[3, side, side], vec![1.0f64; 3 * side * side]);
        let cfg = LimeConfig::default();
        let sal = lime_explain(&linear, &image, 0, &cfg, &[0.0; 3], &mut Rng::new(23, 0)).unwrap();
        let matches = coeffs
            .iter()
            .zip(&sal.weights)
            .filter(|(truth, fit)| truth.signum() == fit.signum())
            .count();
        assert!(
            matches as f64 / coeffs.len() as f64 >= 0.9,
            "only {matches}/16 signs recovered"
        );
    }

    #[test]
    fn lime_intercept_tracks_mean_probability_under_heavy_ridge() {
        let model = Model::Student(tiny_student());
        let image = random_image(10, 16);
        let serial: Box<BatchFn<'_, f64>> = Box::new(|imgs| model.logits_batch(imgs));
        let cfg = LimeConfig {
            samples: 60,
            ridge_lambda: 1e9, // crush every coefficient toward zero
            ..LimeConfig::default()
        };
        let sal = lime_explain(&serial, &image, 0, &cfg, &[0.0; 3], &mut Rng::new(29, 0)).unwrap();
        assert!(sal.weights.iter().all(|c| c.abs() < 1e-6));
        // Re-run the probes to get the weighted mean probability.
        let check = lime_explain(&serial, &image, 0, &cfg, &[0.0; 3], &mut Rng::new(29, 0)).unwrap();
        assert!((sal.intercept.unwrap() - check.intercept.unwrap()).abs() < 1e-12);
        let intercept = sal.intercept.unwrap();
        assert!((0.0..=1.0).contains(&intercept));
    }

    #[test]
    fn overlay_opacity_zero_is_identity() {
        let model = Model::Student(tiny_student());
        let image = random_image(11, 16);
        let sal = grad_cam(&model, &image, 0, None).unwrap();
        let rgb: Vec<u8> = (0..16 * 16 * 3).map(|i| (i % 251) as u8).collect();
        assert_eq!(render_overlay(&rgb, &sal, 0.0).unwrap(), rgb);
    }

    #[test]
    fn overlay_zero_map_is_blue_blend() {
        let model = Model::Student(tiny_student());
        let image = random_image(12, 16);
        let mut sal = grad_cam(&model, &image, 0, None).unwrap();
        sal.map.iter_mut().for_each(|v| *v = 0.0);
        let rgb = vec![100u8; 16 * 16 * 3];
        let out = render_overlay(&rgb, &sal, 0.45).unwrap();
        // Every pixel: blend of (100,100,100) with ramp floor (0,0,255).
        for p in 0..16 * 16 {
            assert_eq!(out[p * 3], 55);
            assert_eq!(out[p * 3 + 1], 55);
            assert_eq!(out[p * 3 + 2], (0.55 * 100.0 + 0.45 * 255.0_f64).round() as u8);
        }
    }

    #[test]
    fn unknown_layer_is_a_config_error() {
        let model = Model::Student(tiny_student());
        let image = random_image(13, 16);
        let err = grad_cam(&model, &image, 0, Some("nope")).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
