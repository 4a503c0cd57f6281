//! Training: cross-entropy and distillation losses, AdamW, gradient
//! clipping, the plateau/early-stop controller, and the teacher/student
//! training loops.

use serde::{Deserialize, Serialize};

use crate::data::{augment, preprocess, AugmentConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ParamSet, Student, Teacher};
use crate::tensor::rng::Rng;
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------- losses

/// Cross-entropy of a `[K]` logit vector against an integer label.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, label: usize) -> Result<Tensor<F>> {
    let k = logits.shape()[0];
    if label >= k {
        return Err(Error::IndexOutOfRange {
            index: label,
            limit: k,
        });
    }
    let log_probs = logits.reshape(&[1, k])?.log_softmax(1)?;
    Ok(log_probs.slice(1, label, 1)?.sum_all().neg())
}

pub struct KdParts<F: Scalar> {
    /// alpha * T^2 * KL(teacher || student), both softened at T.
    pub kd: Tensor<F>,
    /// Plain cross-entropy of the student against the hard label.
    pub ce: Tensor<F>,
}

/// Distillation loss: `alpha * T^2 * KL(p_T || p_S) + (1 - alpha) * CE`.
/// The teacher side is detached; gradients flow only through the student.
pub fn kd_loss<F: Scalar>(
    student_logits: &Tensor<F>,
    teacher_logits: &Tensor<F>,
    label: usize,
    alpha: f64,
    temperature: f64,
) -> Result<(Tensor<F>, KdParts<F>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0,1], got {alpha}")));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let k = student_logits.shape()[0];
    if teacher_logits.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            lhs: student_logits.shape(),
            rhs: teacher_logits.shape(),
        });
    }
    let soft_t = teacher_logits
        .detach()
        .scale(1.0 / temperature)
        .reshape(&[1, k])?;
    let soft_s = student_logits.scale(1.0 / temperature).reshape(&[1, k])?;
    let p_t = soft_t.softmax(1)?;
    let log_p_t = soft_t.log_softmax(1)?;
    let log_p_s = soft_s.log_softmax(1)?;
    let kl = p_t.mul(&log_p_t.sub(&log_p_s)?)?.sum_all();
    let kd = kl.scale(alpha * temperature * temperature);
    let ce = cross_entropy(student_logits, label)?;
    let loss = kd.add(&ce.scale(1.0 - alpha))?;
    Ok((loss, KdParts { kd, ce }))
}

// ----------------------------------------------------------------- adamw

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction. Moments are stored
/// per trainable tensor, keyed by position in the parameter set.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<F: Scalar>(cfg: AdamWConfig, params: &ParamSet<F>) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over every trainable parameter. Parameters without a
    /// gradient buffer are treated as g = 0 (they still decay); frozen
    /// parameters are skipped entirely.
    pub fn step<F: Scalar>(&mut self, params: &ParamSet<F>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (name, p)) in params.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().unwrap_or_else(|| vec![F::zero(); p.len()]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut bad = false;
            p.with_data_mut(|w| {
                for j in 0..w.len() {
                    let g = grad[j].f64();
                    if !g.is_finite() {
                        bad = true;
                        return;
                    }
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    let wj = w[j].f64();
                    let update = c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * wj);
                    w[j] = F::c(wj - update);
                }
            });
            if bad {
                return Err(Error::NonFiniteGrad(name.to_string()));
            }
        }
        Ok(())
    }
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients<F: Scalar>(params: &ParamSet<F>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (name, p) in params.iter() {
        if !p.requires_grad() {
            continue;
        }
        if let Some(grad) = p.grad() {
            for g in grad {
                let g = g.f64();
                if !g.is_finite() {
                    return Err(Error::NonFiniteGrad(name.to_string()));
                }
                sq += g * g;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = F::c(max_norm / norm);
        for (_, p) in params.iter() {
            if p.requires_grad() {
                p.scale_grad(factor);
            }
        }
    }
    Ok(norm)
}

// ------------------------------------------------------------ controller

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    /// A validation loss must beat the best by more than this to count
    /// as an improvement.
    pub improvement_tol: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            plateau_factor: 0.1,
            plateau_patience: 3,
            min_lr: 1e-7,
            early_stop_patience: 5,
            improvement_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerAction {
    pub improved: bool,
    /// New learning rate if this epoch triggered a plateau reduction.
    pub new_lr: Option<f64>,
    pub stop: bool,
}

/// Tracks validation loss, reducing the learning rate on plateaus and
/// requesting an early stop after sustained stagnation.
pub struct TrainController {
    cfg: ControllerConfig,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    since_improve: usize,
    since_reduce: usize,
}

impl TrainController {
    pub fn new(cfg: ControllerConfig) -> Self {
        TrainController {
            cfg,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            since_improve: 0,
            since_reduce: 0,
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, val_loss: f64, current_lr: f64) -> ControllerAction {
        self.epoch += 1;
        if val_loss < self.best - self.cfg.improvement_tol {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.since_improve = 0;
            self.since_reduce = 0;
            return ControllerAction {
                improved: true,
                new_lr: None,
                stop: false,
            };
        }
        self.since_improve += 1;
        self.since_reduce += 1;
        let mut new_lr = None;
        if self.since_reduce >= self.cfg.plateau_patience && current_lr > self.cfg.min_lr {
            new_lr = Some((current_lr * self.cfg.plateau_factor).max(self.cfg.min_lr));
            self.since_reduce = 0;
        }
        ControllerAction {
            improved: false,
            new_lr,
            stop: self.since_improve >= self.cfg.early_stop_patience,
        }
    }
}

// -------------------------------------------------------- training loops

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub augment: bool,
    /// Augmentation strengths used when `augment` is on.
    #[serde(default)]
    pub augment_params: AugmentConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Soft-target weight in the distillation loss.
    pub alpha: f64,
    /// Softening temperature for the distillation loss.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            batch_size: 32,
            clip_norm: 1.0,
            augment: true,
            augment_params: AugmentConfig::default(),
            optimizer: AdamWConfig::default(),
            controller: ControllerConfig::default(),
            alpha: 0.9,
            temperature: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Per-sample hook: build the loss graph and return it with the model's
/// logits for the given preprocessed image.
type StepFn<'a, F> = dyn Fn(&Tensor<F>, usize) -> Result<(Tensor<F>, Tensor<F>)> + 'a;

/// Supervised training of the teacher with cross-entropy.
pub fn train_teacher<F: Scalar>(
    teacher: &Teacher<F>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let warnings = teacher.params.freeze(&teacher.config.freeze);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    run_training(
        &teacher.params,
        dataset,
        teacher.config.image_size,
        cfg,
        seed,
        &|image, label| {
            let logits = teacher.logits(image)?;
            let loss = cross_entropy(&logits, label)?;
            Ok((loss, logits))
        },
        on_epoch,
    )
}

/// Distillation of the student against a trained, frozen teacher. Both the
/// train and validation losses are the combined distillation objective.
pub fn distill_student<F: Scalar>(
    student: &Student<F>,
    teacher: &Teacher<F>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    if teacher.config.num_classes != student.config.num_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes but student has {}",
            teacher.config.num_classes, student.config.num_classes
        )));
    }
    if teacher.config.image_size != student.config.image_size {
        return Err(Error::Config(format!(
            "teacher expects {}px images but student expects {}px",
            teacher.config.image_size, student.config.image_size
        )));
    }
    teacher.params.set_requires_grad(false);
    run_training(
        &student.params,
        dataset,
        student.config.image_size,
        cfg,
        seed,
        &|image, label| {
            let teacher_logits = teacher.logits(image)?;
            let student_logits = student.logits(image)?;
            let (loss, _parts) =
                kd_loss(&student_logits, &teacher_logits, label, cfg.alpha, cfg.temperature)?;
            Ok((loss, student_logits))
        },
        on_epoch,
    )
}

fn run_training<F: Scalar>(
    params: &ParamSet<F>,
    dataset: &Dataset,
    image_size: usize,
    cfg: &TrainConfig,
    seed: u64,
    step_fn: &StepFn<'_, F>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("training requires a non-empty train split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut optimizer = AdamW::new(cfg.optimizer.clone(), params);
    let mut controller = TrainController::new(cfg.controller.clone());
    let aug_cfg = cfg.augment_params.clone();
    let mut history = Vec::new();
    let mut best_snapshot = params.snapshot();
    let mut stopped_early = false;

    // Validation images never change; preprocess them once.
    let val: Vec<(Tensor<F>, usize)> = dataset
        .split(Split::Val)
        .iter()
        .map(|s| (preprocess(s, image_size, &dataset.mean, &dataset.std), s.label))
        .collect();

    for epoch in 1..=cfg.max_epochs {
        let mut order_rng = Rng::new(seed, 1_000 + epoch as u64);
        let order = crate::data::shuffled_indices(train.len(), &mut order_rng);
        let mut aug_rng = Rng::new(seed, 2_000 + epoch as u64);
        let mut train_loss = 0.0f64;
        let mut max_grad_norm = 0.0f64;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = if cfg.augment {
                    augment(&train[i], &aug_cfg, &mut aug_rng)
                } else {
                    train[i].clone()
                };
                let image = preprocess(&sample, image_size, &dataset.mean, &dataset.std);
                let (loss, _logits) = step_fn(&image, sample.label)?;
                let loss_value = loss.item().f64();
                if !loss_value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                train_loss += loss_value;
                // Scaling before backward averages the gradient over the
                // batch as the per-sample grads accumulate.
                loss.scale(scale).backward()?;
            }
            max_grad_norm = max_grad_norm.max(clip_gradients(params, cfg.clip_norm)?);
            optimizer.step(params)?;
        }
        train_loss /= train.len() as f64;

        let (val_loss, val_accuracy) = evaluate_split(params, &val, step_fn, train_loss)?;
        let action = controller.observe(val_loss, optimizer.lr());
        if let Some(lr) = action.new_lr {
            optimizer.set_lr(lr);
        }
        if action.improved {
            best_snapshot = params.snapshot();
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            lr: optimizer.lr(),
            grad_norm: max_grad_norm,
            improved: action.improved,
        };
        on_epoch(&record);
        history.push(record);
        if action.stop {
            stopped_early = true;
            break;
        }
    }

    // Hand back the weights from the best validation epoch.
    params.restore(&best_snapshot);
    Ok(TrainSummary {
        best_epoch: controller.best_epoch(),
        best_val_loss: controller.best_loss(),
        stopped_early,
        history,
    })
}

/// Mean loss and top-1 accuracy over preprocessed (image, label) pairs.
/// Falls back to the train loss when the validation split is empty so the
/// controller still sees a signal.
fn evaluate_split<F: Scalar>(
    params: &ParamSet<F>,
    val: &[(Tensor<F>, usize)],
    step_fn: &StepFn<'_, F>,
    fallback_loss: f64,
) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((fallback_loss, f64::NAN));
    }
    // Forward-only: disable graph building, then restore trainability.
    let flags: Vec<bool> = params.iter().map(|(_, t)| t.requires_grad()).collect();
    params.set_requires_grad(false);
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut result = Ok(());
    for (image, label) in val {
        match step_fn(image, *label) {
            Ok((loss, logits)) => {
                loss_sum += loss.item().f64();
                if argmax(&logits.to_vec()) == *label {
                    correct += 1;
                }
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    for ((_, t), flag) in params.iter().zip(flags) {
        t.set_requires_grad(flag);
    }
    result?;
    Ok((loss_sum / val.len() as f64, correct as f64 / val.len() as f64))
}

pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.f64() > values[best].f64() {
            best = i;
        }
    }
    best
}
