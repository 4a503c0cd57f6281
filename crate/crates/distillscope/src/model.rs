//! Model assembly: the dual-encoder teacher (hierarchical windowed global
//! encoder + region-aware local encoder + gated fusion) and the compact
//! ViT student with optional low-rank adapters.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    window_attention, window_partition, window_reverse, BlockNorms, FfnParams, LoraAdapter,
    MultiHeadParams, ParamBuilder, PatchEmbedding, RegionBiasNet, RelativePositionBias,
    WindowSpec, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::tensor::rng::Rng;
use crate::tensor::{Scalar, Tensor};

// ----------------------------------------------------------------- config

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalEncoderConfig {
    pub patch: usize,
    pub window: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalEncoderConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_true")]
    pub region_aware: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalFeature {
    ClassToken,
    MeanPool,
}

impl Default for LocalFeature {
    fn default() -> Self {
        LocalFeature::ClassToken
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub global: GlobalEncoderConfig,
    pub local: LocalEncoderConfig,
    pub fusion_dim: usize,
    #[serde(default)]
    pub local_feature: LocalFeature,
    /// Parameter-name prefixes excluded from optimizer updates.
    #[serde(default)]
    pub freeze: Vec<String>,
}

impl TeacherConfig {
    /// Desk-scale default: trains in minutes on 32x32 synthetic data.
    pub fn desk(num_classes: usize) -> Self {
        TeacherConfig {
            image_size: 32,
            num_classes,
            global: GlobalEncoderConfig {
                patch: 4,
                window: 4,
                dims: vec![64, 128],
                depths: vec![2, 2],
                heads: vec![2, 4],
            },
            local: LocalEncoderConfig {
                patch: 8,
                dim: 96,
                depth: 4,
                heads: 3,
                region_aware: true,
            },
            fusion_dim: 64,
            local_feature: LocalFeature::ClassToken,
            freeze: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    V,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub scaling: f64,
    pub targets: Vec<LoraTarget>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl StudentConfig {
    pub fn desk(num_classes: usize) -> Self {
        StudentConfig {
            image_size: 32,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 2,
            num_classes,
            lora: None,
        }
    }
}

// -------------------------------------------------------------- paramset

/// Ordered, named parameter collection; the order is the checkpoint
/// manifest order.
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn from_builder(pb: ParamBuilder<F>) -> Self {
        let entries = pb.into_entries();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ParamSet { entries, index }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn set_requires_grad(&self, value: bool) {
        for (_, t) in &self.entries {
            t.set_requires_grad(value);
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Freezes parameters whose name starts with any prefix; returns a
    /// warning per prefix that matched nothing.
    pub fn freeze(&self, prefixes: &[String]) -> Vec<String> {
        let mut warnings = Vec::new();
        for prefix in prefixes {
            let mut matched = false;
            for (name, t) in &self.entries {
                if name.starts_with(prefix.as_str()) {
                    t.set_requires_grad(false);
                    matched = true;
                }
            }
            if !matched {
                warnings.push(format!("freeze prefix '{prefix}' matched no parameters"));
            }
        }
        warnings
    }

    pub fn snapshot(&self) -> Vec<Vec<F>> {
        self.entries.iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<F>]) {
        debug_assert_eq!(snapshot.len(), self.entries.len());
        for ((_, t), values) in self.entries.iter().zip(snapshot) {
            t.with_data_mut(|d| d.copy_from_slice(values));
        }
    }
}

// ----------------------------------------------------------- activations

/// Token grid retained during a forward pass for explainability.
pub struct ActivationRecord<F: Scalar> {
    pub name: String,
    pub tokens: Tensor<F>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Token 0 is a class token and must be dropped before reshaping.
    pub has_class_token: bool,
}

pub struct Activations<F: Scalar> {
    pub records: Vec<ActivationRecord<F>>,
}

impl<F: Scalar> Activations<F> {
    pub fn get(&self, name: &str) -> Option<&ActivationRecord<F>> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn last(&self) -> Option<&ActivationRecord<F>> {
        self.records.last()
    }
}

// -------------------------------------------------------- global encoder

struct GlobalBlock<F: Scalar> {
    norms: BlockNorms<F>,
    attn: MultiHeadParams<F>,
    bias: RelativePositionBias<F>,
    ffn: FfnParams<F>,
    shift: bool,
}

struct PatchMerge<F: Scalar> {
    gamma: Tensor<F>,
    beta: Tensor<F>,
    reduce: Tensor<F>, // [4C, 2C]
}

struct GlobalStage<F: Scalar> {
    blocks: Vec<GlobalBlock<F>>,
    window: usize,
    merge: Option<PatchMerge<F>>,
    /// Projection of this stage's pooled feature to the shared global dim.
    pool_proj: Tensor<F>,
}

pub struct GlobalEncoder<F: Scalar> {
    embed: PatchEmbedding<F>,
    stages: Vec<GlobalStage<F>>,
    final_gamma: Tensor<F>,
    final_beta: Tensor<F>,
    grid0: usize,
    pub out_dim: usize,
}

impl<F: Scalar> GlobalEncoder<F> {
    fn build(
        pb: &mut ParamBuilder<F>,
        prefix: &str,
        image_size: usize,
        cfg: &GlobalEncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n_stages = cfg.dims.len();
        if cfg.depths.len() != n_stages || cfg.heads.len() != n_stages || n_stages == 0 {
            return Err(Error::Config(
                "global encoder dims/depths/heads must have equal nonzero length".into(),
            ));
        }
        let embed = PatchEmbedding::build(
            pb,
            &format!("{prefix}.embed"),
            image_size,
            cfg.patch,
            cfg.dims[0],
            false,
            rng,
        )?;
        let grid0 = image_size / cfg.patch;
        let out_dim = *cfg.dims.last().unwrap();
        let mut stages = Vec::with_capacity(n_stages);
        let mut grid = grid0;
        for s in 0..n_stages {
            let dim = cfg.dims[s];
            // Windows never exceed the grid; a window covering the whole
            // grid makes shifting a no-op.
            let window = cfg.window.min(grid);
            if grid % window != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: grid {grid} not divisible by window {window}"
                )));
            }
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for b in 0..cfg.depths[s] {
                let bp = format!("{prefix}.stage{s}.block{b}");
                blocks.push(GlobalBlock {
                    norms: BlockNorms::build(pb, &bp, dim),
                    attn: MultiHeadParams::build(pb, &format!("{bp}.attn"), dim, cfg.heads[s], rng)?,
                    bias: RelativePositionBias::build(
                        pb,
                        &format!("{bp}.attn"),
                        window,
                        cfg.heads[s],
                        rng,
                    ),
                    ffn: FfnParams::build(pb, &format!("{bp}.ffn"), dim, rng),
                    shift: b % 2 == 1 && window < grid,
                });
            }
            let merge = if s + 1 < n_stages {
                if grid % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {s}: grid {grid} not divisible by 2 for patch merging"
                    )));
                }
                let next_dim = cfg.dims[s + 1];
                if next_dim * 2 != dim * 4 {
                    // Standard halving: next_dim = 2 * dim.
                    return Err(Error::Config(format!(
                        "stage {}: dim {} must double to {} after merging",
                        s,
                        dim,
                        2 * dim
                    )));
                }
                let mp = format!("{prefix}.stage{s}.merge");
                Some(PatchMerge {
                    gamma: pb.ones(&format!("{mp}.norm.g"), &[4 * dim]),
                    beta: pb.zeros(&format!("{mp}.norm.b"), &[4 * dim]),
                    reduce: pb.trunc_normal(&format!("{mp}.reduce"), &[4 * dim, next_dim], rng),
                })
            } else {
                None
            };
            stages.push(GlobalStage {
                blocks,
                window,
                merge,
                pool_proj: pb.trunc_normal(
                    &format!("{prefix}.stage{s}.pool_proj"),
                    &[dim, out_dim],
                    rng,
                ),
            });
            if s + 1 < n_stages {
                grid /= 2;
            }
        }
        Ok(GlobalEncoder {
            embed,
            stages,
            final_gamma: pb.ones(&format!("{prefix}.final_norm.g"), &[out_dim]),
            final_beta: pb.zeros(&format!("{prefix}.final_norm.b"), &[out_dim]),
            grid0,
            out_dim,
        })
    }

    /// Returns the multi-scale pooled feature `[1, out_dim]` and records
    /// each stage's token grid.
    fn forward(
        &self,
        image: &Tensor<F>,
        prefix: &str,
        activations: &mut Vec<ActivationRecord<F>>,
    ) -> Result<Tensor<F>> {
        let mut tokens = self.embed.forward(image)?;
        let mut grid = self.grid0;
        let mut pooled_sum: Option<Tensor<F>> = None;
        for (s, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                let shift = if block.shift { stage.window / 2 } else { 0 };
                let spec = WindowSpec::new(grid, grid, stage.window, shift)?;
                let x = block.norms.norm1(&tokens)?;
                let windows = window_partition(&x, &spec)?;
                let attended = window_attention(&windows, &block.attn, &block.bias, &spec)?;
                let attended = window_reverse(&attended, &spec)?;
                tokens = tokens.add(&attended)?;
                let y = block.norms.norm2(&tokens)?;
                tokens = tokens.add(&block.ffn.forward(&y)?)?;
            }
            activations.push(ActivationRecord {
                name: format!("{prefix}.stage{s}"),
                tokens: tokens.clone(),
                grid_h: grid,
                grid_w: grid,
                has_class_token: false,
            });
            // Multi-scale pooling: mean over tokens, projected to the
            // shared dim, averaged across stages.
            let pooled = tokens.mean_axis(0)?.reshape(&[1, tokens.shape()[1]])?;
            let projected = pooled.matmul(&stage.pool_proj)?;
            pooled_sum = Some(match pooled_sum {
                Some(acc) => acc.add(&projected)?,
                None => projected,
            });
            if let Some(merge) = &stage.merge {
                tokens = merge_tokens(&tokens, grid, merge)?;
                grid /= 2;
            }
        }
        let pooled = pooled_sum.unwrap().scale(1.0 / self.stages.len() as f64);
        pooled.layer_norm(&self.final_gamma, &self.final_beta, LAYER_NORM_EPS)
    }
}

fn merge_tokens<F: Scalar>(
    tokens: &Tensor<F>,
    grid: usize,
    merge: &PatchMerge<F>,
) -> Result<Tensor<F>> {
    let dim = tokens.shape()[1];
    let half = grid / 2;
    let mut indices = Vec::with_capacity(half * half * 4 * dim);
    for y in 0..half {
        for x in 0..half {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let row = (2 * y + dy) * grid + (2 * x + dx);
                for c in 0..dim {
                    indices.push(row * dim + c);
                }
            }
        }
    }
    let merged = tokens.gather(Rc::new(indices), &[half * half, 4 * dim])?;
    merged
        .layer_norm(&merge.gamma, &merge.beta, LAYER_NORM_EPS)?
        .matmul(&merge.reduce)
}

// --------------------------------------------------------- local encoder

struct LocalBlock<F: Scalar> {
    norms: BlockNorms<F>,
    attn: MultiHeadParams<F>,
    region: Option<RegionBiasNet<F>>,
    ffn: FfnParams<F>,
}

pub struct LocalEncoder<F: Scalar> {
    embed: PatchEmbedding<F>,
    blocks: Vec<LocalBlock<F>>,
    final_gamma: Tensor<F>,
    final_beta: Tensor<F>,
    grid: usize,
    pub out_dim: usize,
    feature: LocalFeature,
}

impl<F: Scalar> LocalEncoder<F> {
    fn build(
        pb: &mut ParamBuilder<F>,
        prefix: &str,
        image_size: usize,
        cfg: &LocalEncoderConfig,
        feature: LocalFeature,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embed = PatchEmbedding::build(
            pb,
            &format!("{prefix}.embed"),
            image_size,
            cfg.patch,
            cfg.dim,
            true,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let bp = format!("{prefix}.block{b}");
            blocks.push(LocalBlock {
                norms: BlockNorms::build(pb, &bp, cfg.dim),
                attn: MultiHeadParams::build(pb, &format!("{bp}.attn"), cfg.dim, cfg.heads, rng)?,
                region: cfg
                    .region_aware
                    .then(|| RegionBiasNet::build(pb, &format!("{bp}.region"), cfg.dim, rng)),
                ffn: FfnParams::build(pb, &format!("{bp}.ffn"), cfg.dim, rng),
            });
        }
        Ok(LocalEncoder {
            embed,
            blocks,
            final_gamma: pb.ones(&format!("{prefix}.final_norm.g"), &[cfg.dim]),
            final_beta: pb.zeros(&format!("{prefix}.final_norm.b"), &[cfg.dim]),
            grid: image_size / cfg.patch,
            out_dim: cfg.dim,
            feature,
        })
    }

    fn forward(
        &self,
        image: &Tensor<F>,
        prefix: &str,
        activations: &mut Vec<ActivationRecord<F>>,
    ) -> Result<Tensor<F>> {
        let mut tokens = self.embed.forward(image)?;
        for (b, block) in self.blocks.iter().enumerate() {
            // Same saliency-target placement as the student: one record per
            // block input; the last keeps nonzero patch gradients under a
            // class-token readout.
            activations.push(ActivationRecord {
                name: if b + 1 == self.blocks.len() {
                    format!("{prefix}.final")
                } else {
                    format!("{prefix}.block{b}")
                },
                tokens: tokens.clone(),
                grid_h: self.grid,
                grid_w: self.grid,
                has_class_token: true,
            });
            let x = block.norms.norm1(&tokens)?;
            let attended = match &block.region {
                Some(net) => {
                    let bias = net.bias_matrix(&x, true)?;
                    block.attn.attend(&x, &[bias])?
                }
                None => block.attn.attend(&x, &[])?,
            };
            tokens = tokens.add(&attended)?;
            let y = block.norms.norm2(&tokens)?;
            tokens = tokens.add(&block.ffn.forward(&y)?)?;
        }
        let normed = tokens.layer_norm(&self.final_gamma, &self.final_beta, LAYER_NORM_EPS)?;
        match self.feature {
            LocalFeature::ClassToken => normed.slice(0, 0, 1),
            LocalFeature::MeanPool => {
                let n = normed.shape()[0];
                let patches = normed.slice(0, 1, n - 1)?;
                patches.mean_axis(0)?.reshape(&[1, self.out_dim])
            }
        }
    }
}

// ---------------------------------------------------------------- fusion

/// Sigmoid-gated convex combination of the projected global and local
/// features.
pub struct FusionGate<F: Scalar> {
    proj_g: Tensor<F>, // [d_g, d]
    proj_l: Tensor<F>, // [d_l, d]
    gate_w: Tensor<F>, // [2d, 1]
    gate_b: Tensor<F>, // [1]
}

impl<F: Scalar> FusionGate<F> {
    fn build(
        pb: &mut ParamBuilder<F>,
        prefix: &str,
        global_dim: usize,
        local_dim: usize,
        fusion_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        FusionGate {
            proj_g: pb.trunc_normal(&format!("{prefix}.proj_g"), &[global_dim, fusion_dim], rng),
            proj_l: pb.trunc_normal(&format!("{prefix}.proj_l"), &[local_dim, fusion_dim], rng),
            gate_w: pb.trunc_normal(&format!("{prefix}.gate_w"), &[2 * fusion_dim, 1], rng),
            gate_b: pb.zeros(&format!("{prefix}.gate_b"), &[1]),
        }
    }

    /// Returns (fused `[1, d]`, alpha `[1]`).
    pub fn fuse(&self, f_g: &Tensor<F>, f_l: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let g = f_g.matmul(&self.proj_g)?;
        let l = f_l.matmul(&self.proj_l)?;
        let both = Tensor::concat(&[g.clone(), l.clone()], 1)?;
        let alpha = both
            .matmul(&self.gate_w)?
            .add_broadcast(&self.gate_b)?
            .sigmoid()
            .reshape(&[1])?;
        let one_minus = alpha.neg().add_scalar(1.0);
        let fused = g
            .mul_scalar_tensor(&alpha)?
            .add(&l.mul_scalar_tensor(&one_minus)?)?;
        Ok((fused, alpha))
    }
}

// --------------------------------------------------------------- teacher

pub struct Teacher<F: Scalar> {
    pub config: TeacherConfig,
    pub params: ParamSet<F>,
    global: GlobalEncoder<F>,
    local: LocalEncoder<F>,
    fusion: FusionGate<F>,
    head_w: Tensor<F>,
    head_b: Tensor<F>,
}

impl<F: Scalar> Teacher<F> {
    pub fn build(config: &TeacherConfig, rng: &mut Rng) -> Result<Self> {
        let mut pb = ParamBuilder::new();
        let global = GlobalEncoder::build(&mut pb, "global", config.image_size, &config.global, rng)?;
        let local = LocalEncoder::build(
            &mut pb,
            "local",
            config.image_size,
            &config.local,
            config.local_feature,
            rng,
        )?;
        let fusion = FusionGate::build(
            &mut pb,
            "fusion",
            global.out_dim,
            local.out_dim,
            config.fusion_dim,
            rng,
        );
        let head_w = pb.trunc_normal("head.w", &[config.fusion_dim, config.num_classes], rng);
        let head_b = pb.zeros("head.b", &[config.num_classes]);
        Ok(Teacher {
            config: config.clone(),
            params: ParamSet::from_builder(pb),
            global,
            local,
            fusion,
            head_w,
            head_b,
        })
    }

    /// Logits `[K]` plus the activation record for explainability.
    pub fn forward(&self, image: &Tensor<F>) -> Result<(Tensor<F>, Activations<F>)> {
        let expected = self.config.image_size;
        if image.shape() != [3, expected, expected] {
            return Err(Error::ShapeMismatch {
                op: "teacher_forward",
                lhs: image.shape(),
                rhs: vec![3, expected, expected],
            });
        }
        let mut records = Vec::new();
        let f_g = self.global.forward(image, "global", &mut records)?;
        let f_l = self.local.forward(image, "local", &mut records)?;
        let (fused, _alpha) = self.fusion.fuse(&f_g, &f_l)?;
        let logits = fused
            .matmul(&self.head_w)?
            .add_broadcast(&self.head_b)?
            .reshape(&[self.config.num_classes])?;
        Ok((logits, Activations { records }))
    }

    pub fn logits(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward(image)?.0)
    }
}

// --------------------------------------------------------------- student

struct StudentBlock<F: Scalar> {
    norms: BlockNorms<F>,
    attn: MultiHeadParams<F>,
    ffn: FfnParams<F>,
}

pub struct Student<F: Scalar> {
    pub config: StudentConfig,
    pub params: ParamSet<F>,
    embed: PatchEmbedding<F>,
    blocks: Vec<StudentBlock<F>>,
    final_gamma: Tensor<F>,
    final_beta: Tensor<F>,
    head_w: Tensor<F>,
    head_b: Tensor<F>,
    grid: usize,
}

impl<F: Scalar> Student<F> {
    pub fn build(config: &StudentConfig, rng: &mut Rng) -> Result<Self> {
        if let Some(lora) = &config.lora {
            if lora.rank == 0 {
                return Err(Error::Config("LoRA rank must be >= 1".into()));
            }
            if lora.rank >= config.dim {
                return Err(Error::Config(format!(
                    "LoRA rank {} must be below the projection dim {}",
                    lora.rank, config.dim
                )));
            }
        }
        let mut pb = ParamBuilder::new();
        let embed = PatchEmbedding::build(
            &mut pb,
            "student.embed",
            config.image_size,
            config.patch,
            config.dim,
            true,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let bp = format!("student.block{b}");
            let mut attn =
                MultiHeadParams::build(&mut pb, &format!("{bp}.attn"), config.dim, config.heads, rng)?;
            if let Some(lora) = &config.lora {
                let scale = lora.scaling / lora.rank as f64;
                for target in &lora.targets {
                    let tag = match target {
                        LoraTarget::Q => "wq",
                        LoraTarget::V => "wv",
                    };
                    let adapter = LoraAdapter {
                        down: pb.trunc_normal(
                            &format!("{bp}.attn.{tag}.lora_a"),
                            &[config.dim, lora.rank],
                            rng,
                        ),
                        up: pb.zeros(&format!("{bp}.attn.{tag}.lora_b"), &[lora.rank, config.dim]),
                        scale,
                    };
                    match target {
                        LoraTarget::Q => attn.lora_q = Some(adapter),
                        LoraTarget::V => attn.lora_v = Some(adapter),
                    }
                }
            }
            blocks.push(StudentBlock {
                norms: BlockNorms::build(&mut pb, &bp, config.dim),
                attn,
                ffn: FfnParams::build(&mut pb, &format!("{bp}.ffn"), config.dim, rng),
            });
        }
        let final_gamma = pb.ones("student.final_norm.g", &[config.dim]);
        let final_beta = pb.zeros("student.final_norm.b", &[config.dim]);
        let head_w = pb.trunc_normal("student.head.w", &[config.dim, config.num_classes], rng);
        let head_b = pb.zeros("student.head.b", &[config.num_classes]);
        let params = ParamSet::from_builder(pb);
        if config.lora.is_some() {
            // Only the adapters train; base projection weights are frozen.
            for (name, t) in params.iter() {
                let is_adapter = name.contains(".lora_");
                let is_base_proj = name.ends_with(".wq") || name.ends_with(".wv");
                if is_base_proj && !is_adapter {
                    t.set_requires_grad(false);
                }
            }
        }
        Ok(Student {
            config: config.clone(),
            params,
            embed,
            blocks,
            final_gamma,
            final_beta,
            head_w,
            head_b,
            grid: config.image_size / config.patch,
        })
    }

    pub fn forward(&self, image: &Tensor<F>) -> Result<(Tensor<F>, Activations<F>)> {
        let expected = self.config.image_size;
        if image.shape() != [3, expected, expected] {
            return Err(Error::ShapeMismatch {
                op: "student_forward",
                lhs: image.shape(),
                rhs: vec![3, expected, expected],
            });
        }
        let mut tokens = self.embed.forward(image)?;
        let mut records = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            // One saliency target per block: the token grid entering it.
            // The default target is the last block's input, where patch
            // tokens still reach the class-token readout through attention
            // (afterwards their gradients vanish).
            records.push(ActivationRecord {
                name: if b + 1 == self.blocks.len() {
                    "student.final".to_string()
                } else {
                    format!("student.block{b}")
                },
                tokens: tokens.clone(),
                grid_h: self.grid,
                grid_w: self.grid,
                has_class_token: true,
            });
            let x = block.norms.norm1(&tokens)?;
            let attended = block.attn.attend(&x, &[])?;
            tokens = tokens.add(&attended)?;
            let y = block.norms.norm2(&tokens)?;
            tokens = tokens.add(&block.ffn.forward(&y)?)?;
        }
        let normed = tokens.layer_norm(&self.final_gamma, &self.final_beta, LAYER_NORM_EPS)?;
        let cls = normed.slice(0, 0, 1)?;
        let logits = cls
            .matmul(&self.head_w)?
            .add_broadcast(&self.head_b)?
            .reshape(&[self.config.num_classes])?;
        Ok((logits, Activations { records }))
    }

    pub fn logits(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward(image)?.0)
    }
}

/// Either model behind one forward interface (evaluation, explainability).
pub enum Model<F: Scalar> {
    Teacher(Teacher<F>),
    Student(Student<F>),
}

impl<F: Scalar> Model<F> {
    pub fn forward(&self, image: &Tensor<F>) -> Result<(Tensor<F>, Activations<F>)> {
        match self {
            Model::Teacher(t) => t.forward(image),
            Model::Student(s) => s.forward(image),
        }
    }

    pub fn params(&self) -> &ParamSet<F> {
        match self {
            Model::Teacher(t) => &t.params,
            Model::Student(s) => &s.params,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Teacher(t) => t.config.num_classes,
            Model::Student(s) => s.config.num_classes,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            Model::Teacher(t) => t.config.image_size,
            Model::Student(s) => s.config.image_size,
        }
    }
}
