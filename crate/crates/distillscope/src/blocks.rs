//! Attention building blocks: patch embedding, multi-head self-attention,
//! FFN, (shifted-)window attention with relative position bias, and the
//! region-aware attention bias used by the local encoder.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Finite stand-in for -inf in attention masks.
pub const MASK_NEG: f64 = -1e9;

fn trunc_normal_tensor<F: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::c(rng.truncated_normal(std))).collect();
    Tensor::param(shape, data)
}

fn zeros_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![F::zero(); n])
}

fn ones_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![F::one(); n])
}

/// Collects named parameters as they are created so the optimizer and
/// checkpoint see a stable ordering.
#[derive(Default)]
pub struct ParamBuilder<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> ParamBuilder<F> {
    pub fn new() -> Self {
        ParamBuilder {
            entries: Vec::new(),
        }
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], rng: &mut Rng) -> Tensor<F> {
        let t = trunc_normal_tensor(shape, 0.02, rng);
        self.entries.push((name.to_string(), t.clone()));
        t
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor<F> {
        let t = zeros_param(shape);
        self.entries.push((name.to_string(), t.clone()));
        t
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Tensor<F> {
        let t = ones_param(shape);
        self.entries.push((name.to_string(), t.clone()));
        t
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<F>)> {
        self.entries
    }
}

// ---------------------------------------------------------------- patches

/// Patch embedding: flatten non-overlapping P x P patches, project, add a
/// positional table, and optionally prepend a class token.
pub struct PatchEmbedding<F: Scalar> {
    pub patch: usize,
    pub dim: usize,
    pub projection: Tensor<F>,  // [3*P*P, D]
    pub positional: Tensor<F>,  // [N(+1), D]
    pub class_token: Option<Tensor<F>>, // [1, D]
}

impl<F: Scalar> PatchEmbedding<F> {
    pub fn build(
        pb: &mut ParamBuilder<F>,
        prefix: &str,
        image_size: usize,
        patch: usize,
        dim: usize,
        class_token: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if image_size % patch != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} not divisible by patch {patch}"
            )));
        }
        let n = (image_size / patch) * (image_size / patch);
        let tokens = n + class_token as usize;
        Ok(PatchEmbedding {
            patch,
            dim,
            projection: pb.trunc_normal(&format!("{prefix}.proj"), &[3 * patch * patch, dim], rng),
            positional: pb.trunc_normal(&format!("{prefix}.pos"), &[tokens, dim], rng),
            class_token: class_token
                .then(|| pb.trunc_normal(&format!("{prefix}.cls"), &[1, dim], rng)),
        })
    }

    /// `[3, S, S]` image to `[N(+1), D]` tokens.
    pub fn forward(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: shape,
                rhs: vec![3, 0, 0],
            });
        }
        let side = shape[1];
        if side % self.patch != 0 {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: shape,
                rhs: vec![self.patch],
            });
        }
        let grid = side / self.patch;
        let p = self.patch;
        // Gather pixels patch by patch: each row is a flattened patch in
        // (channel, y, x) order.
        let mut indices = Vec::with_capacity(grid * grid * 3 * p * p);
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            indices.push(c * side * side + y * side + x);
                        }
                    }
                }
            }
        }
        let patches = image.gather(Rc::new(indices), &[grid * grid, 3 * p * p])?;
        let mut tokens = patches.matmul(&self.projection)?;
        if let Some(cls) = &self.class_token {
            tokens = Tensor::concat(&[cls.clone(), tokens], 0)?;
        }
        tokens.add(&self.positional)
    }
}

// ------------------------------------------------------------- attention

/// Per-head projection parameters. Heads are stored fused: `wq/wk/wv` are
/// `[D, H*dk]` with head h occupying columns `h*dk..(h+1)*dk`.
pub struct MultiHeadParams<F: Scalar> {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>, // [H*dk, D]
    pub bo: Tensor<F>, // [D]
    /// Optional low-rank adapters (W_eff = W + scale * A B), keyed Q/V.
    pub lora_q: Option<LoraAdapter<F>>,
    pub lora_v: Option<LoraAdapter<F>>,
}

pub struct LoraAdapter<F: Scalar> {
    pub down: Tensor<F>, // [D, r]
    pub up: Tensor<F>,   // [r, H*dk]
    pub scale: f64,
}

impl<F: Scalar> LoraAdapter<F> {
    fn delta(&self) -> Result<Tensor<F>> {
        Ok(self.down.matmul(&self.up)?.scale(self.scale))
    }
}

impl<F: Scalar> MultiHeadParams<F> {
    pub fn build(
        pb: &mut ParamBuilder<F>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} not divisible by heads {heads}"
            )));
        }
        let head_dim = dim / heads;
        Ok(MultiHeadParams {
            heads,
            head_dim,
            wq: pb.trunc_normal(&format!("{prefix}.wq"), &[dim, dim], rng),
            wk: pb.trunc_normal(&format!("{prefix}.wk"), &[dim, dim], rng),
            wv: pb.trunc_normal(&format!("{prefix}.wv"), &[dim, dim], rng),
            wo: pb.trunc_normal(&format!("{prefix}.wo"), &[dim, dim], rng),
            bo: pb.zeros(&format!("{prefix}.bo"), &[dim]),
            lora_q: None,
            lora_v: None,
        })
    }

    fn effective_wq(&self) -> Result<Tensor<F>> {
        match &self.lora_q {
            Some(l) => self.wq.add(&l.delta()?),
            None => Ok(self.wq.clone()),
        }
    }

    fn effective_wv(&self) -> Result<Tensor<F>> {
        match &self.lora_v {
            Some(l) => self.wv.add(&l.delta()?),
            None => Ok(self.wv.clone()),
        }
    }

    /// Scaled dot-product attention over `[N, D]` tokens. `bias` tensors
    /// of shape `[N, N]` are added to the logits inside the softmax.
    pub fn attend(&self, tokens: &Tensor<F>, biases: &[Tensor<F>]) -> Result<Tensor<F>> {
        self.attend_per_head(tokens, &|_| Ok(biases.to_vec()))
    }

    /// As `attend` but the bias list may depend on the head index (needed
    /// for the relative position table, which is learned per head).
    pub fn attend_per_head(
        &self,
        tokens: &Tensor<F>,
        biases_for_head: &dyn Fn(usize) -> Result<Vec<Tensor<F>>>,
    ) -> Result<Tensor<F>> {
        let n = tokens.shape()[0];
        let dk = self.head_dim;
        let scale = 1.0 / (dk as f64).sqrt();
        let q_all = tokens.matmul(&self.effective_wq()?)?;
        let k_all = tokens.matmul(&self.wk)?;
        let v_all = tokens.matmul(&self.effective_wv()?)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = q_all.slice(1, h * dk, dk)?;
            let k = k_all.slice(1, h * dk, dk)?;
            let v = v_all.slice(1, h * dk, dk)?;
            let mut logits = q.matmul(&k.transpose()?)?.scale(scale);
            for bias in biases_for_head(h)? {
                if bias.shape() != [n, n] {
                    return Err(Error::ShapeMismatch {
                        op: "attention_bias",
                        lhs: vec![n, n],
                        rhs: bias.shape(),
                    });
                }
                logits = logits.add(&bias)?;
            }
            let attn = logits.softmax(1)?;
            heads.push(attn.matmul(&v)?);
        }
        let merged = Tensor::concat(&heads, 1)?;
        merged.matmul(&self.wo)?.add_broadcast(&self.bo)
    }
}

// ------------------------------------------------------------------ ffn

pub struct FfnParams<F: Scalar> {
    pub w1: Tensor<F>, // [D, 4D]
    pub b1: Tensor<F>,
    pub w2: Tensor<F>, // [4D, D]
    pub b2: Tensor<F>,
}

impl<F: Scalar> FfnParams<F> {
    pub fn build(pb: &mut ParamBuilder<F>, prefix: &str, dim: usize, rng: &mut Rng) -> Self {
        let hidden = 4 * dim;
        FfnParams {
            w1: pb.trunc_normal(&format!("{prefix}.w1"), &[dim, hidden], rng),
            b1: pb.zeros(&format!("{prefix}.b1"), &[hidden]),
            w2: pb.trunc_normal(&format!("{prefix}.w2"), &[hidden, dim], rng),
            b2: pb.zeros(&format!("{prefix}.b2"), &[dim]),
        }
    }

    pub fn forward(&self, tokens: &Tensor<F>) -> Result<Tensor<F>> {
        tokens
            .matmul(&self.w1)?
            .add_broadcast(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_broadcast(&self.b2)
    }
}

// --------------------------------------------------------------- windows

/// Window layout over an `h x w` token grid: size, shift, learned relative
/// position bias table, and the additive shift mask.
pub struct WindowSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(grid_h: usize, grid_w: usize, window: usize, shift: usize) -> Result<Self> {
        if grid_h % window != 0 || grid_w % window != 0 {
            return Err(Error::ShapeMismatch {
                op: "window_partition",
                lhs: vec![grid_h, grid_w],
                rhs: vec![window],
            });
        }
        Ok(WindowSpec {
            grid_h,
            grid_w,
            window,
            shift,
        })
    }

    pub fn windows(&self) -> usize {
        (self.grid_h / self.window) * (self.grid_w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Flat token permutation: output position i holds input token
    /// `perm[i]`, after cyclic shift and window partition.
    pub fn partition_order(&self) -> Vec<usize> {
        let (h, w, m, s) = (self.grid_h, self.grid_w, self.window, self.shift);
        let mut order = Vec::with_capacity(h * w);
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        // Cyclic shift by (-s, -s): shifted (y,x) reads
                        // source (y+s, x+s) mod grid.
                        let y = (wy * m + iy + s) % h;
                        let x = (wx * m + ix + s) % w;
                        order.push(y * w + x);
                    }
                }
            }
        }
        order
    }

    /// Inverse of `partition_order`.
    pub fn reverse_order(&self) -> Vec<usize> {
        let fwd = self.partition_order();
        let mut inv = vec![0usize; fwd.len()];
        for (dst, &src) in fwd.iter().enumerate() {
            inv[src] = dst;
        }
        inv
    }

    /// Relative-coordinate index into the `(2M-1)^2` bias table for each
    /// (query, key) pair within a window.
    pub fn relative_index(&self) -> Vec<usize> {
        let m = self.window;
        let span = 2 * m - 1;
        let mut idx = Vec::with_capacity(m * m * m * m);
        for qy in 0..m {
            for qx in 0..m {
                for ky in 0..m {
                    for kx in 0..m {
                        let dy = qy as isize - ky as isize + (m as isize - 1);
                        let dx = qx as isize - kx as isize + (m as isize - 1);
                        idx.push(dy as usize * span + dx as usize);
                    }
                }
            }
        }
        idx
    }

    /// Additive masks per window (empty when shift == 0): pairs of tokens
    /// that were not neighbors before the cyclic shift get `MASK_NEG`.
    pub fn shift_masks<F: Scalar>(&self) -> Vec<Option<Tensor<F>>> {
        let (h, w, m, s) = (self.grid_h, self.grid_w, self.window, self.shift);
        if s == 0 {
            return vec![None; self.windows()];
        }
        // Slab labeling on the *shifted* grid: the last window row/column
        // mixes tokens wrapped from the opposite edge (band 2) with tokens
        // shifted in from the interior (band 1); everything else is band 0.
        let band = |coord: usize, len: usize| -> usize {
            if coord < len - m {
                0
            } else if coord < len - s {
                1
            } else {
                2
            }
        };
        let win_w = w / m;
        let mm = m * m;
        (0..self.windows())
            .map(|win| {
                let (wy, wx) = (win / win_w, win % win_w);
                let ids: Vec<usize> = (0..mm)
                    .map(|i| band(wy * m + i / m, h) * 3 + band(wx * m + i % m, w))
                    .collect();
                if ids.iter().all(|&r| r == ids[0]) {
                    return None;
                }
                let mut mask = vec![F::zero(); mm * mm];
                for i in 0..mm {
                    for j in 0..mm {
                        if ids[i] != ids[j] {
                            mask[i * mm + j] = F::c(MASK_NEG);
                        }
                    }
                }
                Some(Tensor::new(&[mm, mm], mask))
            })
            .collect()
    }
}

/// Reorders `[h*w, D]` tokens into `[nW * M^2, D]` window layout.
pub fn window_partition<F: Scalar>(tokens: &Tensor<F>, spec: &WindowSpec) -> Result<Tensor<F>> {
    permute_rows(tokens, &spec.partition_order())
}

/// Exact inverse of `window_partition`.
pub fn window_reverse<F: Scalar>(windows: &Tensor<F>, spec: &WindowSpec) -> Result<Tensor<F>> {
    permute_rows(windows, &spec.reverse_order())
}

fn permute_rows<F: Scalar>(tokens: &Tensor<F>, order: &[usize]) -> Result<Tensor<F>> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[0] != order.len() {
        return Err(Error::ShapeMismatch {
            op: "window_partition",
            lhs: shape,
            rhs: vec![order.len()],
        });
    }
    let d = shape[1];
    let mut indices = Vec::with_capacity(order.len() * d);
    for &row in order {
        for col in 0..d {
            indices.push(row * d + col);
        }
    }
    tokens.gather(Rc::new(indices), &[order.len(), d])
}

/// Learned relative-position bias for windowed attention.
pub struct RelativePositionBias<F: Scalar> {
    pub table: Tensor<F>, // [(2M-1)^2, H]
    pub window: usize,
    pub heads: usize,
}

impl<F: Scalar> RelativePositionBias<F> {
    pub fn build(
        pb: &mut ParamBuilder<F>,
        prefix: &str,
        window: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        let span = 2 * window - 1;
        RelativePositionBias {
            table: pb.trunc_normal(&format!("{prefix}.rpb"), &[span * span, heads], rng),
            window,
            heads,
        }
    }

    /// `[M^2, M^2]` bias matrix for head `h`.
    pub fn matrix(&self, spec: &WindowSpec, head: usize) -> Result<Tensor<F>> {
        let span = 2 * self.window - 1;
        if self.table.shape() != [span * span, self.heads] {
            return Err(Error::Config(format!(
                "relative bias table must be [{}, {}], got {:?}",
                span * span,
                self.heads,
                self.table.shape()
            )));
        }
        let mm = spec.tokens_per_window();
        let rel = spec.relative_index();
        let flat: Vec<usize> = rel.iter().map(|&r| r * self.heads + head).collect();
        self.table.gather(Rc::new(flat), &[mm, mm])
    }
}

/// Attention computed independently per window with relative position bias
/// and, when shifted, the cross-boundary mask.
pub fn window_attention<F: Scalar>(
    windows: &Tensor<F>,
    params: &MultiHeadParams<F>,
    bias: &RelativePositionBias<F>,
    spec: &WindowSpec,
) -> Result<Tensor<F>> {
    let mm = spec.tokens_per_window();
    let masks = spec.shift_masks::<F>();
    let mut outputs = Vec::with_capacity(spec.windows());
    for win in 0..spec.windows() {
        let tokens = windows.slice(0, win * mm, mm)?;
        let mask = masks[win].clone();
        let out = params.attend_per_head(&tokens, &|h| {
            let mut b = vec![bias.matrix(spec, h)?];
            if let Some(m) = &mask {
                b.push(m.clone());
            }
            Ok(b)
        })?;
        outputs.push(out);
    }
    Tensor::concat(&outputs, 0)
}

// -------------------------------------------------------- region biasing

/// Two-layer perceptron producing a per-token scalar bias, broadcast over
/// query rows (key-wise) and shared across heads. The class-token key is
/// pinned to bias zero.
pub struct RegionBiasNet<F: Scalar> {
    pub w1: Tensor<F>, // [D, D/2]
    pub b1: Tensor<F>,
    pub w2: Tensor<F>, // [D/2, 1]
    pub b2: Tensor<F>,
}

impl<F: Scalar> RegionBiasNet<F> {
    pub fn build(pb: &mut ParamBuilder<F>, prefix: &str, dim: usize, rng: &mut Rng) -> Self {
        let hidden = dim / 2;
        RegionBiasNet {
            w1: pb.trunc_normal(&format!("{prefix}.w1"), &[dim, hidden], rng),
            b1: pb.zeros(&format!("{prefix}.b1"), &[hidden]),
            w2: pb.trunc_normal(&format!("{prefix}.w2"), &[hidden, 1], rng),
            b2: pb.zeros(&format!("{prefix}.b2"), &[1]),
        }
    }

    /// `[N, N]` additive bias with R_ij = r_j; column 0 (the class token)
    /// is zeroed when `has_class_token`.
    pub fn bias_matrix(&self, tokens: &Tensor<F>, has_class_token: bool) -> Result<Tensor<F>> {
        let n = tokens.shape()[0];
        let r = tokens
            .matmul(&self.w1)?
            .add_broadcast(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_broadcast(&self.b2)?
            .reshape(&[n])?;
        let r = if has_class_token {
            let mut mask = vec![F::one(); n];
            mask[0] = F::zero();
            r.mul(&Tensor::new(&[n], mask))?
        } else {
            r
        };
        // Broadcast r over query rows: R[i*n + j] = r[j].
        let idx: Vec<usize> = (0..n * n).map(|i| i % n).collect();
        r.gather(Rc::new(idx), &[n, n])
    }
}

/// MHSA with the region bias added to the logits of every head.
pub fn region_aware_attention<F: Scalar>(
    tokens: &Tensor<F>,
    params: &MultiHeadParams<F>,
    net: &RegionBiasNet<F>,
    has_class_token: bool,
) -> Result<Tensor<F>> {
    let bias = net.bias_matrix(tokens, has_class_token)?;
    params.attend(tokens, &[bias])
}

/// Pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x)).
pub struct BlockNorms<F: Scalar> {
    pub gamma1: Tensor<F>,
    pub beta1: Tensor<F>,
    pub gamma2: Tensor<F>,
    pub beta2: Tensor<F>,
}

impl<F: Scalar> BlockNorms<F> {
    pub fn build(pb: &mut ParamBuilder<F>, prefix: &str, dim: usize) -> Self {
        BlockNorms {
            gamma1: pb.ones(&format!("{prefix}.norm1.g"), &[dim]),
            beta1: pb.zeros(&format!("{prefix}.norm1.b"), &[dim]),
            gamma2: pb.ones(&format!("{prefix}.norm2.g"), &[dim]),
            beta2: pb.zeros(&format!("{prefix}.norm2.b"), &[dim]),
        }
    }

    pub fn norm1(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(&self.gamma1, &self.beta1, LAYER_NORM_EPS)
    }

    pub fn norm2(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(&self.gamma2, &self.beta2, LAYER_NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn randomize(t: &Tensor<f64>, rng: &mut Rng, lo: f64, hi: f64) {
        t.with_data_mut(|d| {
            for v in d.iter_mut() {
                *v = rng.uniform(lo, hi);
            }
        });
    }

    fn random_tokens(n: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    fn mhsa(dim: usize, heads: usize, rng: &mut Rng) -> MultiHeadParams<f64> {
        let mut pb = ParamBuilder::new();
        let p = MultiHeadParams::build(&mut pb, "t", dim, heads, rng).unwrap();
        for w in [&p.wq, &p.wk, &p.wv, &p.wo] {
            randomize(w, rng, -0.5, 0.5);
        }
        randomize(&p.bo, rng, -0.1, 0.1);
        p
    }

    #[test]
    fn patch_embedding_token_count_and_gather_order() {
        let mut rng = Rng::new(3, 0);
        let mut pb = ParamBuilder::new();
        let pe: PatchEmbedding<f64> =
            PatchEmbedding::build(&mut pb, "e", 4, 2, 2, false, &mut rng).unwrap();
        // Identity-pick projection: dim 0 reads the first flattened patch
        // element (channel 0, top-left pixel of the patch).
        pe.projection.with_data_mut(|d| {
            d.fill(0.0);
            d[0] = 1.0;
        });
        pe.positional.with_data_mut(|d| d.fill(0.0));
        let mut img = vec![0.0; 3 * 16];
        for y in 0..4 {
            for x in 0..4 {
                img[y * 4 + x] = (10 * y + x) as f64;
            }
        }
        let tokens = pe.forward(&Tensor::new(&[3, 4, 4], img)).unwrap();
        assert_eq!(tokens.shape(), vec![4, 2]);
        let t = tokens.to_vec();
        // Row-major patch order: (0,0), (0,2), (2,0), (2,2).
        assert_eq!([t[0], t[2], t[4], t[6]], [0.0, 2.0, 20.0, 22.0]);
    }

    #[test]
    fn class_token_adds_one_row() {
        let mut rng = Rng::new(4, 0);
        let mut pb = ParamBuilder::new();
        let pe: PatchEmbedding<f64> =
            PatchEmbedding::build(&mut pb, "e", 8, 4, 6, true, &mut rng).unwrap();
        let img = random_tokens(1, 3 * 64, &mut rng).reshape(&[3, 8, 8]).unwrap();
        assert_eq!(pe.forward(&img).unwrap().shape(), vec![5, 6]);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut rng = Rng::new(5, 0);
        let params = mhsa(6, 2, &mut rng);
        params.wq.with_data_mut(|d| d.fill(0.0));
        params.wk.with_data_mut(|d| d.fill(0.0));
        let tokens = random_tokens(5, 6, &mut rng);
        let out = params.attend(&tokens, &[]).unwrap().to_vec();
        // Uniform weights: every row is mean(V) routed through W^O + b^O.
        let v = tokens.matmul(&params.wv).unwrap();
        let mean_v = v.mean_axis(0).unwrap().reshape(&[1, 6]).unwrap();
        let expect = mean_v
            .matmul(&params.wo)
            .unwrap()
            .add_broadcast(&params.bo)
            .unwrap()
            .to_vec();
        for row in 0..5 {
            for c in 0..6 {
                assert!((out[row * 6 + c] - expect[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = Rng::new(6, 0);
        let params = mhsa(4, 2, &mut rng);
        let tokens = random_tokens(1, 4, &mut rng);
        let out = params.attend(&tokens, &[]).unwrap().to_vec();
        let expect = tokens
            .matmul(&params.wv)
            .unwrap()
            .matmul(&params.wo)
            .unwrap()
            .add_broadcast(&params.bo)
            .unwrap()
            .to_vec();
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_then_reverse_is_identity_bit_exact() {
        let mut rng = Rng::new(7, 0);
        for shift in [0, 1] {
            let spec = WindowSpec::new(4, 4, 2, shift).unwrap();
            let order = spec.partition_order();
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..16).collect::<Vec<_>>(), "not a permutation");
            let tokens = random_tokens(16, 3, &mut rng);
            let round = window_reverse(&window_partition(&tokens, &spec).unwrap(), &spec).unwrap();
            assert_eq!(tokens.to_vec(), round.to_vec());
        }
    }

    #[test]
    fn shift_masks_empty_without_shift() {
        let spec = WindowSpec::new(4, 4, 2, 0).unwrap();
        assert!(spec.shift_masks::<f64>().iter().all(|m| m.is_none()));
        let shifted = WindowSpec::new(4, 4, 2, 1).unwrap();
        let masks = shifted.shift_masks::<f64>();
        assert!(masks.iter().any(|m| m.is_some()));
        for mask in masks.into_iter().flatten() {
            let m = mask.to_vec();
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(m[i * 4 + j], m[j * 4 + i], "mask must be symmetric");
                    assert!(m[i * 4 + j] == 0.0 || m[i * 4 + j] == MASK_NEG);
                }
            }
        }
    }

    #[test]
    fn unshifted_single_window_reduces_to_plain_attention() {
        // Window covering the whole grid, zero bias table: windowed
        // attention must equal vanilla MHSA on the same tokens.
        let mut rng = Rng::new(8, 0);
        let params = mhsa(8, 2, &mut rng);
        let mut pb = ParamBuilder::new();
        let bias = RelativePositionBias::build(&mut pb, "b", 3, 2, &mut rng);
        bias.table.with_data_mut(|d| d.fill(0.0));
        let spec = WindowSpec::new(3, 3, 3, 0).unwrap();
        let tokens = random_tokens(9, 8, &mut rng);
        let windows = window_partition(&tokens, &spec).unwrap();
        let windowed =
            window_reverse(&window_attention(&windows, &params, &bias, &spec).unwrap(), &spec)
                .unwrap()
                .to_vec();
        let plain = params.attend(&tokens, &[]).unwrap().to_vec();
        for (a, b) in windowed.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// Tile index for the clipped (non-cyclic) shifted tiling: boundaries
    /// at s, s+m, s+2m, ... This is the semantic ground truth the cyclic
    /// shift + mask construction must reproduce.
    fn tile(coord: usize, m: usize, s: usize) -> usize {
        if s == 0 {
            coord / m
        } else if coord < s {
            0
        } else {
            1 + (coord - s) / m
        }
    }

    /// Brute-force shifted-window attention evaluated directly on the
    /// original grid with explicit loops -- no permutations, no masks.
    fn brute_force_shifted(
        tokens: &Tensor<f64>,
        params: &MultiHeadParams<f64>,
        table: &Tensor<f64>,
        grid: usize,
        m: usize,
        s: usize,
    ) -> Vec<f64> {
        let n = grid * grid;
        let d = tokens.shape()[1];
        let heads = params.heads;
        let dk = params.head_dim;
        let span = 2 * m - 1;
        let matvec = |x: &[f64], w: &Tensor<f64>, rows: usize| -> Vec<f64> {
            let wd = w.to_vec();
            let (wi, wj) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; rows * wj];
            for r in 0..rows {
                for i in 0..wi {
                    let xv = x[r * wi + i];
                    for j in 0..wj {
                        out[r * wj + j] += xv * wd[i * wj + j];
                    }
                }
            }
            out
        };
        let x = tokens.to_vec();
        let q = matvec(&x, &params.wq, n);
        let k = matvec(&x, &params.wk, n);
        let v = matvec(&x, &params.wv, n);
        let tbl = table.to_vec();
        let mut merged = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                let (iy, ix) = (i / grid, i % grid);
                let allowed: Vec<usize> = (0..n)
                    .filter(|&j| {
                        let (jy, jx) = (j / grid, j % grid);
                        tile(iy, m, s) == tile(jy, m, s) && tile(ix, m, s) == tile(jx, m, s)
                    })
                    .collect();
                let logits: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        let (jy, jx) = (j / grid, j % grid);
                        let mut dot = 0.0;
                        for c in 0..dk {
                            dot += q[i * d + h * dk + c] * k[j * d + h * dk + c];
                        }
                        let dy = (i / grid) as isize - jy as isize + m as isize - 1;
                        let dx = (i % grid) as isize - jx as isize + m as isize - 1;
                        dot / (dk as f64).sqrt()
                            + tbl[(dy as usize * span + dx as usize) * heads + h]
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (w, &j) in exps.iter().zip(&allowed) {
                    for c in 0..dk {
                        merged[i * d + h * dk + c] += w / z * v[j * d + h * dk + c];
                    }
                }
            }
        }
        let mut out = matvec(&merged, &params.wo, n);
        let bo = params.bo.to_vec();
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] += bo[c];
            }
        }
        out
    }

    #[test]
    fn shifted_attention_matches_brute_force_oracle() {
        let mut rng = Rng::new(9, 0);
        for (grid, m, s) in [(4usize, 2usize, 1usize), (6, 3, 1), (8, 4, 2)] {
            let params = mhsa(8, 2, &mut rng);
            let mut pb = ParamBuilder::new();
            let bias = RelativePositionBias::build(&mut pb, "b", m, 2, &mut rng);
            randomize(&bias.table, &mut rng, -0.5, 0.5);
            let tokens = random_tokens(grid * grid, 8, &mut rng);
            let spec = WindowSpec::new(grid, grid, m, s).unwrap();
            let windows = window_partition(&tokens, &spec).unwrap();
            let out = window_reverse(
                &window_attention(&windows, &params, &bias, &spec).unwrap(),
                &spec,
            )
            .unwrap()
            .to_vec();
            let oracle = brute_force_shifted(&tokens, &params, &bias.table, grid, m, s);
            for (i, (a, b)) in out.iter().zip(&oracle).enumerate() {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                assert!(err <= 1e-6, "grid {grid} m {m} s {s} elem {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn region_bias_is_key_wise_and_class_token_neutral() {
        let mut rng = Rng::new(10, 0);
        let mut pb = ParamBuilder::new();
        let net: RegionBiasNet<f64> = RegionBiasNet::build(&mut pb, "r", 6, &mut rng);
        randomize(&net.w1, &mut rng, -0.5, 0.5);
        randomize(&net.w2, &mut rng, -0.5, 0.5);
        let tokens = random_tokens(5, 6, &mut rng);
        let bias = net.bias_matrix(&tokens, true).unwrap().to_vec();
        for i in 0..5 {
            assert_eq!(bias[i * 5], 0.0, "class-token key column must be zero");
            for j in 0..5 {
                assert_eq!(bias[i * 5 + j], bias[j], "bias must depend on the key only");
            }
        }
        assert!(bias[1].abs() > 0.0, "patch keys should get a nonzero bias");
    }

    #[test]
    fn zero_region_net_reduces_to_plain_attention() {
        let mut rng = Rng::new(11, 0);
        let params = mhsa(6, 2, &mut rng);
        let mut pb = ParamBuilder::new();
        let net: RegionBiasNet<f64> = RegionBiasNet::build(&mut pb, "r", 6, &mut rng);
        net.w2.with_data_mut(|d| d.fill(0.0));
        let tokens = random_tokens(4, 6, &mut rng);
        let with = region_aware_attention(&tokens, &params, &net, true)
            .unwrap()
            .to_vec();
        let without = params.attend(&tokens, &[]).unwrap().to_vec();
        for (a, b) in with.iter().zip(&without) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn large_region_bias_dominates_attention() {
        // Add a huge constant bias toward key 2 by hand; attention output
        // must collapse to that key's value row.
        let mut rng = Rng::new(12, 0);
        let params = mhsa(6, 2, &mut rng);
        let tokens = random_tokens(4, 6, &mut rng);
        let mut bias = vec![0.0f64; 16];
        for i in 0..4 {
            bias[i * 4 + 2] = 50.0;
        }
        let out = params
            .attend(&tokens, &[Tensor::new(&[4, 4], bias)])
            .unwrap()
            .to_vec();
        let v2 = tokens
            .matmul(&params.wv)
            .unwrap()
            .slice(0, 2, 1)
            .unwrap()
            .matmul(&params.wo)
            .unwrap()
            .add_broadcast(&params.bo)
            .unwrap()
            .to_vec();
        for row in 0..4 {
            for c in 0..6 {
                assert!((out[row * 6 + c] - v2[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_rank_update_leaves_attention_unchanged() {
        let mut rng = Rng::new(13, 0);
        let mut plain = mhsa(6, 2, &mut rng);
        let tokens = random_tokens(4, 6, &mut rng);
        let before = plain.attend(&tokens, &[]).unwrap().to_vec();
        let down = Tensor::param(&[6, 2], (0..12).map(|_| rng.uniform(-0.5, 0.5)).collect());
        let up = Tensor::param(&[2, 6], vec![0.0; 12]);
        plain.lora_q = Some(LoraAdapter {
            down: down.clone(),
            up: up.clone(),
            scale: 2.0,
        });
        let frozen = plain.attend(&tokens, &[]).unwrap().to_vec();
        assert_eq!(before, frozen, "zero-initialized update must be a no-op");
        up.with_data_mut(|d| d[0] = 0.7);
        let after = plain.attend(&tokens, &[]).unwrap().to_vec();
        assert_ne!(before, after);
    }

    #[test]
    fn window_attention_gradients_match_finite_differences() {
        let mut rng = Rng::new(14, 0);
        let params = mhsa(4, 1, &mut rng);
        let mut pb = ParamBuilder::new();
        let bias = RelativePositionBias::build(&mut pb, "b", 2, 1, &mut rng);
        randomize(&bias.table, &mut rng, -0.5, 0.5);
        let tokens = random_tokens(16, 4, &mut rng);
        let spec = WindowSpec::new(4, 4, 2, 1).unwrap();
        let leaves = [params.wq.clone(), bias.table.clone()];
        let report = check_gradients("window_attention", &leaves, 1e-5, || {
            let w = window_partition(&tokens, &spec)?;
            let a = window_attention(&w, &params, &bias, &spec)?;
            Ok(a.mul(&a)?.mean_all())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "err {}", report.max_rel_err);
    }

    #[test]
    fn region_net_gradients_match_finite_differences() {
        let mut rng = Rng::new(15, 0);
        let params = mhsa(6, 2, &mut rng);
        let mut pb = ParamBuilder::new();
        let net: RegionBiasNet<f64> = RegionBiasNet::build(&mut pb, "r", 6, &mut rng);
        randomize(&net.w1, &mut rng, -0.5, 0.5);
        randomize(&net.w2, &mut rng, -0.5, 0.5);
        let tokens = random_tokens(5, 6, &mut rng);
        let leaves = [
            net.w1.clone(),
            net.b1.clone(),
            net.w2.clone(),
            net.b2.clone(),
        ];
        let report = check_gradients("region_net", &leaves, 1e-5, || {
            let out = region_aware_attention(&tokens, &params, &net, true)?;
            Ok(out.mul(&out)?.mean_all())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "err {}", report.max_rel_err);
    }

    #[test]
    fn ffn_expands_four_fold() {
        let mut rng = Rng::new(16, 0);
        let mut pb = ParamBuilder::new();
        let ffn: FfnParams<f64> = FfnParams::build(&mut pb, "f", 6, &mut rng);
        assert_eq!(ffn.w1.shape(), vec![6, 24]);
        assert_eq!(ffn.w2.shape(), vec![24, 6]);
        let tokens = random_tokens(3, 6, &mut rng);
        assert_eq!(ffn.forward(&tokens).unwrap().shape(), vec![3, 6]);
    }
}
