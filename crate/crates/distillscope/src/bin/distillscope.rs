//! Command-line surface for the distillation pipeline: synthetic data,
//! teacher/student training, evaluation, saliency maps, and gradient
//! verification. Every numeric result is written under `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use distillscope::data::{
    denormalize, load_dataset, make_synthetic, preprocess, read_ppm, write_dataset, write_ppm,
    Dataset, ImageSample, Split,
};
use distillscope::explain::{
    grad_cam, grad_cam_pp, lime_explain, render_overlay, score_cam, LimeConfig, SaliencyMap,
};
use distillscope::io::{load_checkpoint, save_checkpoint, CheckpointMeta, ClassRoc, RunConfig};
use distillscope::metrics::{classification_report, roc_auc, ConfusionMatrix};
use distillscope::model::{Model, Student, StudentConfig, Teacher, TeacherConfig};
use distillscope::tensor::rng::Rng;
use distillscope::train::{distill_student, train_teacher, EpochRecord, TrainSummary};
use distillscope::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "distillscope",
    version,
    about = "Dual-encoder teacher to compact ViT student distillation pipeline"
)]
struct Cli {
    /// Run configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed; overrides DISTILLSCOPE_SEED and the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap for batched forward passes.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the seeded synthetic dataset and write it with a manifest.
    MakeSynthetic,
    /// Train the dual-encoder teacher with cross-entropy.
    TrainTeacher,
    /// Distill a compact student from a teacher checkpoint.
    DistillStudent {
        /// Teacher checkpoint; defaults to <out>/teacher.kdvc.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split, or report on a confusion
    /// matrix CSV directly.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Confusion matrix CSV; skips model inference when given.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Write a saliency overlay (PPM) and JSON sidecar for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// External PPM image; defaults to a test-split sample.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Test-split sample index when no image is given.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target class; defaults to the model's prediction.
        #[arg(long)]
        class: Option<usize>,
        /// Activation record to explain; defaults to the last block.
        #[arg(long)]
        layer: Option<String>,
        /// Heatmap opacity in [0,1].
        #[arg(long, default_value_t = 0.5)]
        opacity: f64,
    },
    /// Verify analytic gradients of every tensor op against finite
    /// differences and write the error table.
    Gradcheck,
}

#[derive(Copy, Clone, ValueEnum)]
enum Method {
    Gradcam,
    Gradcampp,
    Scorecam,
    Lime,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Gradcam => "gradcam",
            Method::Gradcampp => "gradcampp",
            Method::Scorecam => "scorecam",
            Method::Lime => "lime",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let env_seed = std::env::var("DISTILLSCOPE_SEED").ok();
    let seed = config.resolve_seed(cli.seed, env_seed.as_deref())?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    match &cli.cmd {
        Cmd::MakeSynthetic => make_synthetic_cmd(&config, seed, &out),
        Cmd::TrainTeacher => train_teacher_cmd(&config, seed, &out, cli.threads),
        Cmd::DistillStudent { teacher } => {
            distill_student_cmd(&config, seed, &out, cli.threads, teacher.as_deref())
        }
        Cmd::Evaluate {
            checkpoint,
            confusion,
        } => evaluate_cmd(&config, &out, cli.threads, checkpoint.as_deref(), confusion.as_deref()),
        Cmd::Explain {
            checkpoint,
            method,
            image,
            index,
            class,
            layer,
            opacity,
        } => explain_cmd(
            &config,
            seed,
            &out,
            cli.threads,
            checkpoint,
            *method,
            image.as_deref(),
            *index,
            *class,
            layer.as_deref(),
            *opacity,
        ),
        Cmd::Gradcheck => gradcheck_cmd(&out),
    }
}

// -------------------------------------------------------------- inference

/// Batched forward passes for a checkpointed model. With more than one
/// thread, each worker loads its own model replica from the checkpoint
/// and results are aggregated in input order, so outputs are identical
/// for every thread count.
struct Predictor {
    ckpt: PathBuf,
    threads: usize,
    model: Model<f32>,
}

impl Predictor {
    fn load(ckpt: &Path, threads: usize) -> Result<Self> {
        let (model, _) = load_checkpoint(ckpt)?;
        Ok(Predictor {
            ckpt: ckpt.to_path_buf(),
            threads,
            model,
        })
    }

    fn logits_many(&self, images: &[Tensor<f32>]) -> distillscope::Result<Vec<Vec<f64>>> {
        if self.threads <= 1 || images.len() < 2 {
            return self.model.logits_batch(images);
        }
        // Tensors are not Send; ship raw buffers and rebuild per worker.
        let raw: Vec<(Vec<usize>, Vec<f32>)> =
            images.iter().map(|t| (t.shape(), t.to_vec())).collect();
        let chunk = raw.len().div_ceil(self.threads);
        let chunk_results: Vec<distillscope::Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = raw
                .chunks(chunk)
                .map(|part| {
                    let ckpt = self.ckpt.clone();
                    s.spawn(move || -> distillscope::Result<Vec<Vec<f64>>> {
                        let (model, _) = load_checkpoint(&ckpt)?;
                        part.iter()
                            .map(|(shape, data)| {
                                let t = Tensor::new(shape, data.clone());
                                Ok(model.forward(&t)?.0.to_f64_vec())
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(raw.len());
        for r in chunk_results {
            out.extend(r?);
        }
        Ok(out)
    }
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Runs the test split through a checkpointed model and writes the full
/// report set. Returns test accuracy.
fn evaluate_model(
    predictor: &Predictor,
    dataset: &Dataset,
    history: &[EpochRecord],
    out: &Path,
) -> Result<f64> {
    if predictor.model.num_classes() != dataset.num_classes() {
        bail!(
            "model has {} classes, dataset has {}",
            predictor.model.num_classes(),
            dataset.num_classes()
        );
    }
    let size = predictor.model.image_size();
    let images: Vec<Tensor<f32>> = dataset
        .test
        .iter()
        .map(|s| preprocess(s, size, &dataset.mean, &dataset.std))
        .collect();
    let logits = predictor.logits_many(&images)?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax_f64(l)).collect();
    let mut cm = ConfusionMatrix::new(dataset.num_classes());
    for (sample, p) in dataset.test.iter().zip(&probs) {
        cm.record(sample.label, argmax(p))?;
    }
    let report = classification_report(&cm, &dataset.classes)?;
    let mut rocs = Vec::new();
    for (c, class) in dataset.classes.iter().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let positives: Vec<bool> = dataset.test.iter().map(|s| s.label == c).collect();
        let curve = match roc_auc(&scores, &positives) {
            Ok(curve) => Some(curve),
            Err(Error::Config(_)) => None, // single-class split: AUC undefined
            Err(e) => return Err(e.into()),
        };
        rocs.push(ClassRoc {
            class: class.clone(),
            curve,
        });
    }
    let files = distillscope::io::write_report(out, history, &report, &cm, &dataset.classes, &rocs)?;
    for f in &files {
        eprintln!("wrote {}", f.display());
    }
    Ok(report.accuracy)
}

fn load_config_dataset(config: &RunConfig) -> Result<Dataset> {
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| anyhow!("this command needs a dataset; set \"dataset\" in the config"))?;
    Ok(load_dataset(path)?)
}

fn summary_meta(seed: u64, summary: &TrainSummary, test_accuracy: f64) -> CheckpointMeta {
    CheckpointMeta {
        epoch: summary.best_epoch as u64,
        seed,
        metrics: serde_json::json!({
            "best_val_loss": summary.best_val_loss,
            "stopped_early": summary.stopped_early,
            "test_accuracy": test_accuracy,
        }),
    }
}

// ------------------------------------------------------------ subcommands

fn make_synthetic_cmd(config: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let dataset = make_synthetic(seed, &config.synthetic)?;
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = write_dataset(&dataset, &out.join("dataset"))?;
    println!("{}", manifest.display());
    Ok(())
}

fn progress(which: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        eprintln!(
            "{which} epoch {:>3}  train {:.4}  val {:.4}  acc {:.4}  lr {:.2e}{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_accuracy,
            r.lr,
            if r.improved { "  *" } else { "" }
        );
    }
}

fn train_teacher_cmd(config: &RunConfig, seed: u64, out: &Path, threads: usize) -> Result<()> {
    let dataset = load_config_dataset(config)?;
    let tcfg = config
        .teacher
        .clone()
        .unwrap_or_else(|| TeacherConfig::desk(dataset.num_classes()));
    if tcfg.num_classes != dataset.num_classes() {
        bail!(
            "teacher config declares {} classes, dataset has {}",
            tcfg.num_classes,
            dataset.num_classes()
        );
    }
    let teacher: Teacher<f32> = Teacher::build(&tcfg, &mut Rng::new(seed, 1))?;
    let summary = train_teacher(&teacher, &dataset, &config.train, seed, &mut progress("teacher"))?;
    let ckpt = out.join("teacher.kdvc");
    save_checkpoint(&Model::Teacher(teacher), &summary_meta(seed, &summary, 0.0), &ckpt)?;
    let predictor = Predictor::load(&ckpt, threads)?;
    let accuracy = evaluate_model(&predictor, &dataset, &summary.history, out)?;
    // Re-save with the final metric so the checkpoint is self-describing.
    save_checkpoint(&predictor.model, &summary_meta(seed, &summary, accuracy), &ckpt)?;
    eprintln!("wrote {}", ckpt.display());
    println!("teacher test accuracy {accuracy:.4}");
    Ok(())
}

fn distill_student_cmd(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    threads: usize,
    teacher_ckpt: Option<&Path>,
) -> Result<()> {
    let dataset = load_config_dataset(config)?;
    let default_ckpt = out.join("teacher.kdvc");
    let teacher_path = teacher_ckpt.unwrap_or(&default_ckpt);
    let (teacher_model, _) = load_checkpoint(teacher_path)
        .with_context(|| format!("loading teacher checkpoint {}", teacher_path.display()))?;
    let teacher = match teacher_model {
        Model::Teacher(t) => t,
        Model::Student(_) => bail!(
            "{} holds a student checkpoint; pass a teacher",
            teacher_path.display()
        ),
    };
    let scfg = config
        .student
        .clone()
        .unwrap_or_else(|| StudentConfig::desk(dataset.num_classes()));
    if scfg.num_classes != dataset.num_classes() {
        bail!(
            "student config declares {} classes, dataset has {}",
            scfg.num_classes,
            dataset.num_classes()
        );
    }
    let student: Student<f32> = Student::build(&scfg, &mut Rng::new(seed, 2))?;
    let summary = distill_student(
        &student,
        &teacher,
        &dataset,
        &config.train,
        seed,
        &mut progress("student"),
    )?;
    let ckpt = out.join("student.kdvc");
    save_checkpoint(&Model::Student(student), &summary_meta(seed, &summary, 0.0), &ckpt)?;
    let predictor = Predictor::load(&ckpt, threads)?;
    let accuracy = evaluate_model(&predictor, &dataset, &summary.history, out)?;
    save_checkpoint(&predictor.model, &summary_meta(seed, &summary, accuracy), &ckpt)?;
    eprintln!("wrote {}", ckpt.display());
    println!("student test accuracy {accuracy:.4}");
    Ok(())
}

fn evaluate_cmd(
    config: &RunConfig,
    out: &Path,
    threads: usize,
    checkpoint: Option<&Path>,
    confusion: Option<&Path>,
) -> Result<()> {
    match (checkpoint, confusion) {
        (None, Some(csv)) => {
            let text = std::fs::read_to_string(csv)
                .with_context(|| format!("reading {}", csv.display()))?;
            let (cm, names) = ConfusionMatrix::from_csv(&text)?;
            let report = classification_report(&cm, &names)?;
            distillscope::io::write_report(out, &[], &report, &cm, &names, &[])?;
            println!("accuracy {:.4}", report.accuracy);
            Ok(())
        }
        (Some(ckpt), None) => {
            let dataset = load_config_dataset(config)?;
            let predictor = Predictor::load(ckpt, threads)?;
            let accuracy = evaluate_model(&predictor, &dataset, &[], out)?;
            println!("accuracy {accuracy:.4}");
            Ok(())
        }
        _ => bail!("evaluate needs exactly one of --checkpoint or --confusion"),
    }
}

#[allow(clippy::too_many_arguments)]
fn explain_cmd(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    threads: usize,
    checkpoint: &Path,
    method: Method,
    image: Option<&Path>,
    index: usize,
    class: Option<usize>,
    layer: Option<&str>,
    opacity: f64,
) -> Result<()> {
    let dataset = load_config_dataset(config)?;
    let predictor = Predictor::load(checkpoint, threads)?;
    let model = &predictor.model;
    let size = model.image_size();

    let sample = match image {
        Some(path) => {
            let (pixels, height, width) = read_ppm(path)?;
            ImageSample {
                pixels,
                height,
                width,
                label: 0,
                split: Split::Test,
                region: None,
            }
        }
        None => dataset
            .test
            .get(index)
            .cloned()
            .ok_or_else(|| anyhow!("test split has {} samples, index {index} is out of range", dataset.test.len()))?,
    };
    let input: Tensor<f32> = preprocess(&sample, size, &dataset.mean, &dataset.std);

    let logits = model.forward(&input)?.0.to_f64_vec();
    let class_index = class.unwrap_or_else(|| argmax(&logits));
    if class_index >= model.num_classes() {
        bail!(
            "class {class_index} out of range for a {}-class model",
            model.num_classes()
        );
    }

    let batch = |imgs: &[Tensor<f32>]| predictor.logits_many(imgs);
    let map: SaliencyMap = match method {
        Method::Gradcam => grad_cam(model, &input, class_index, layer)?,
        Method::Gradcampp => grad_cam_pp(model, &input, class_index, layer)?,
        Method::Scorecam => score_cam(model, &input, class_index, layer, 32, &batch)?,
        Method::Lime => {
            let pm = dataset.pixel_mean();
            let fill = [
                (pm[0] / 255.0 - dataset.mean[0]) / dataset.std[0],
                (pm[1] / 255.0 - dataset.mean[1]) / dataset.std[1],
                (pm[2] / 255.0 - dataset.mean[2]) / dataset.std[2],
            ];
            lime_explain(
                &batch,
                &input,
                class_index,
                &LimeConfig::default(),
                &fill,
                &mut Rng::new(seed, 7),
            )?
        }
    };
    for w in &map.warnings {
        eprintln!("warning: {w}");
    }

    let rgb: Vec<u8> = denormalize(&input, &dataset.mean, &dataset.std)
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let overlay = render_overlay(&rgb, &map, opacity)?;
    let ppm_path = out.join(format!("explain_{}.ppm", method.name()));
    write_ppm(&ppm_path, &overlay, map.height, map.width)?;
    let json_path = out.join(format!("explain_{}.json", method.name()));
    std::fs::write(&json_path, serde_json::to_string_pretty(&map)?)?;
    eprintln!("wrote {}", ppm_path.display());
    eprintln!("wrote {}", json_path.display());
    println!("class {class_index} map max at input resolution written");
    Ok(())
}

fn gradcheck_cmd(out: &Path) -> Result<()> {
    let reports = distillscope::gradcheck::standard_suite()?;
    let path = out.join("gradcheck.json");
    std::fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
    eprintln!("wrote {}", path.display());
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{:<18} {:.3e}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    if worst > 1e-5 {
        bail!("gradient check failed: max relative error {worst:.3e} > 1e-5");
    }
    Ok(())
}
