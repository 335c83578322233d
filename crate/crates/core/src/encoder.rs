//! Patch-token encoder: patchify, a small pre-norm transformer backbone and
//! class-token differencing of the output tokens.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// An `H×W×C` image with values in `[0, 1]`, stored row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("non-finite pixel value".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Overwrite every pixel of grid cell `index` (row-major patch order)
    /// with `fill`.
    pub fn fill_patch(&mut self, index: usize, patch_side: usize, fill: f64) {
        let cols = self.width / patch_side;
        let (r, c) = (index / cols, index % cols);
        for y in r * patch_side..(r + 1) * patch_side {
            for x in c * patch_side..(c + 1) * patch_side {
                for ch in 0..self.channels {
                    self.set(y, x, ch, fill);
                }
            }
        }
    }
}

/// Grid of `N = rows·cols` feature tokens of width `d`; token `i` sits at
/// grid cell `(i / cols, i % cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_side: usize,
}

impl TokenGrid {
    pub fn new(tokens: Array2<f64>, grid_rows: usize, grid_cols: usize, patch_side: usize) -> Result<Self> {
        if tokens.nrows() != grid_rows * grid_cols {
            return Err(Error::Dimension(format!(
                "{} tokens for a {grid_rows}x{grid_cols} grid",
                tokens.nrows()
            )));
        }
        Ok(Self { tokens, grid_rows, grid_cols, patch_side })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn coord(&self, index: usize) -> (usize, usize) {
        (index / self.grid_cols, index % self.grid_cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_cols + col
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub use_class_token: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch_side: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            use_class_token: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_size % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_side {}",
                self.image_size, self.patch_side
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("channels, embed_dim and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
}

/// Split an image into row-major `L×L×C` patches, one flattened patch per
/// output row (inner order: y, x, channel).
pub fn patchify(image: &ImageTensor, patch_side: usize) -> Result<Array2<f64>> {
    if patch_side == 0 || image.height % patch_side != 0 || image.width % patch_side != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} image is not divisible into {patch_side}-pixel patches",
            image.height, image.width
        )));
    }
    let (rows, cols) = (image.height / patch_side, image.width / patch_side);
    let ch = image.channels;
    let mut out = Array2::zeros((rows * cols, patch_side * patch_side * ch));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = out.row_mut(r * cols + c);
            let mut at = 0;
            for dy in 0..patch_side {
                let start = ((r * patch_side + dy) * image.width + c * patch_side) * ch;
                for &v in &image.data[start..start + patch_side * ch] {
                    row[at] = v;
                    at += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Location of pixel `(y, x, c)` inside the [`patchify`] output.
pub fn pixel_to_patch_entry(y: usize, x: usize, c: usize, width: usize, channels: usize, patch_side: usize) -> (usize, usize) {
    let cols = width / patch_side;
    let patch = (y / patch_side) * cols + x / patch_side;
    let offset = ((y % patch_side) * patch_side + x % patch_side) * channels + c;
    (patch, offset)
}

/// A patch-token backbone that can sit under the prototype layer.
pub trait Backbone {
    fn embed_dim(&self) -> usize;

    fn uses_class_token(&self) -> bool;

    /// Parameter tensors in the order [`Backbone::forward`] expects them bound.
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)>;

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>>;

    /// Encode `patches` (`N×patch_dim`). Returns the `1×d` class token (when
    /// the backbone uses one) and the `N×d` patch tokens.
    fn forward(&self, g: &mut Graph, params: &[Var], patches: Var) -> (Option<Var>, Var);
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub qkv_w: Array2<f64>,
    pub qkv_b: Array2<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array2<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array2<f64>,
}

/// Small ViT: linear patch embedding, learnable class token and positional
/// embedding, `depth` pre-norm attention blocks and a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_w: Array2<f64>,
    pub patch_b: Array2<f64>,
    pub cls: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Array2<f64>,
    pub norm_b: Array2<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let positions = config.num_patches() + usize::from(config.use_class_token);
        let patch_w = xavier(&mut rng, config.patch_dim(), d);
        let cls = normal(&mut rng, 1, d, 0.02);
        let pos = normal(&mut rng, positions, d, 0.02);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                qkv_w: xavier(&mut rng, d, 3 * d),
                qkv_b: Array2::zeros((1, 3 * d)),
                proj_w: xavier(&mut rng, d, d),
                proj_b: Array2::zeros((1, d)),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
                fc1_w: xavier(&mut rng, d, hidden),
                fc1_b: Array2::zeros((1, hidden)),
                fc2_w: xavier(&mut rng, hidden, d),
                fc2_b: Array2::zeros((1, d)),
            })
            .collect();
        Ok(Self {
            config,
            patch_w,
            patch_b: Array2::zeros((1, d)),
            cls,
            pos,
            blocks,
            norm_g: Array2::ones((1, d)),
            norm_b: Array2::zeros((1, d)),
        })
    }

    /// Checks that every tensor has the shape the config implies.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = Encoder::new(self.config.clone())?;
        for ((name, want), (_, have)) in fresh.named_tensors().into_iter().zip(self.named_tensors()) {
            if want.dim() != have.dim() {
                return Err(Error::Contract(format!(
                    "encoder tensor {name} has shape {:?}, expected {:?}",
                    have.dim(),
                    want.dim()
                )));
            }
        }
        if fresh.blocks.len() != self.blocks.len() {
            return Err(Error::Contract("encoder depth does not match config".into()));
        }
        Ok(())
    }

    /// Run the backbone on one image and return the class vector (zero when
    /// the class token is disabled) together with the patch-token grid.
    pub fn encode(&self, image: &ImageTensor) -> Result<(Array1<f64>, TokenGrid)> {
        self.check_shapes()?;
        let cfg = &self.config;
        if image.height != cfg.image_size || image.width != cfg.image_size || image.channels != cfg.channels {
            return Err(Error::Dimension(format!(
                "encoder expects {0}x{0}x{1} images, got {2}x{3}x{4}",
                cfg.image_size, cfg.channels, image.height, image.width, image.channels
            )));
        }
        let patches = patchify(image, cfg.patch_side)?;
        let mut g = Graph::new();
        let params: Vec<Var> = self.named_tensors().into_iter().map(|(_, t)| g.constant(t.clone())).collect();
        let input = g.constant(patches);
        let (cls, tokens) = self.forward(&mut g, &params, input);
        let class_vector = match cls {
            Some(c) => g.value(c).row(0).to_owned(),
            None => Array1::zeros(cfg.embed_dim),
        };
        let side = cfg.grid_side();
        let grid = TokenGrid::new(g.value(tokens).clone(), side, side, cfg.patch_side)?;
        Ok((class_vector, grid))
    }
}

fn affine_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Var {
    let n = g.layer_norm_rows(x);
    let s = g.mul(n, gain);
    g.add(s, bias)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add(y, b)
}

impl Backbone for Encoder {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn uses_class_token(&self) -> bool {
        self.config.use_class_token
    }

    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("enc.patch_w".to_string(), &self.patch_w),
            ("enc.patch_b".to_string(), &self.patch_b),
            ("enc.cls".to_string(), &self.cls),
            ("enc.pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let fields = [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("qkv_w", &b.qkv_w),
                ("qkv_b", &b.qkv_b),
                ("proj_w", &b.proj_w),
                ("proj_b", &b.proj_b),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("fc1_w", &b.fc1_w),
                ("fc1_b", &b.fc1_b),
                ("fc2_w", &b.fc2_w),
                ("fc2_b", &b.fc2_b),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("enc.blocks.{i}.{n}"), t)));
        }
        out.push(("enc.norm_g".to_string(), &self.norm_g));
        out.push(("enc.norm_b".to_string(), &self.norm_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.qkv_w,
                &mut b.qkv_b,
                &mut b.proj_w,
                &mut b.proj_b,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ]);
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        out
    }

    fn forward(&self, g: &mut Graph, params: &[Var], patches: Var) -> (Option<Var>, Var) {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let n = cfg.num_patches();
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("encoder parameter binding too short");

        let (patch_w, patch_b, cls, pos) = (next(), next(), next(), next());
        let embedded = linear(g, patches, patch_w, patch_b);
        let mut x = if cfg.use_class_token {
            let seq = g.concat_rows(&[cls, embedded]);
            g.add(seq, pos)
        } else {
            g.add(embedded, pos)
        };

        let heads = cfg.heads;
        let head_dim = d / heads;
        let att_scale = 1.0 / (head_dim as f64).sqrt();
        for _ in 0..cfg.depth {
            let (ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b) = (next(), next(), next(), next(), next(), next());
            let (ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b) = (next(), next(), next(), next(), next(), next());

            let h = affine_norm(g, x, ln1_g, ln1_b);
            let qkv = linear(g, h, qkv_w, qkv_b);
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let q = g.slice_cols(qkv, head * head_dim, head_dim);
                let k = g.slice_cols(qkv, d + head * head_dim, head_dim);
                let v = g.slice_cols(qkv, 2 * d + head * head_dim, head_dim);
                let scores = g.matmul_nt(q, k);
                let scores = g.scale(scores, att_scale);
                let att = g.softmax_rows(scores);
                outs.push(g.matmul(att, v));
            }
            let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let attn = linear(g, merged, proj_w, proj_b);
            x = g.add(x, attn);

            let h = affine_norm(g, x, ln2_g, ln2_b);
            let h = linear(g, h, fc1_w, fc1_b);
            let h = g.gelu(h);
            let h = linear(g, h, fc2_w, fc2_b);
            x = g.add(x, h);
        }
        let (norm_g, norm_b) = (next(), next());
        let out = affine_norm(g, x, norm_g, norm_b);
        if cfg.use_class_token {
            let c = g.slice_rows(out, 0, 1);
            let t = g.slice_rows(out, 1, n);
            (Some(c), t)
        } else {
            (None, out)
        }
    }
}

/// Class-token differencing: `z_f^i = z_patch^i − z_class` when enabled,
/// the patch tokens unchanged otherwise.
pub fn feature_tokens(class_vector: &Array1<f64>, grid: &TokenGrid, use_class_token: bool) -> Result<TokenGrid> {
    if class_vector.len() != grid.dim() {
        return Err(Error::Dimension(format!(
            "class vector has {} entries, tokens have {}",
            class_vector.len(),
            grid.dim()
        )));
    }
    let mut out = grid.clone();
    if use_class_token {
        out.tokens -= class_vector;
    }
    Ok(out)
}

/// Graph form of [`feature_tokens`].
pub fn feature_tokens_var(g: &mut Graph, class_vector: Option<Var>, tokens: Var) -> Var {
    match class_vector {
        Some(c) => g.sub(tokens, c),
        None => tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn small_config(depth: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            channels: 2,
            patch_side: 4,
            embed_dim: 16,
            depth,
            heads: 2,
            mlp_ratio: 2,
            use_class_token: true,
            seed: 3,
        }
    }

    fn ramp_image(size: usize, ch: usize) -> ImageTensor {
        let data = (0..size * size * ch).map(|i| (i % 17) as f64 / 17.0).collect();
        ImageTensor::new(size, size, ch, data).unwrap()
    }

    #[test]
    fn patch_counts() {
        let img = ImageTensor::filled(224, 224, 3, 0.5);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.dim(), (196, 16 * 16 * 3));
        let img = ImageTensor::filled(64, 64, 3, 0.5);
        assert_eq!(patchify(&img, 8).unwrap().nrows(), 64);
    }

    #[test]
    fn zero_image_gives_zero_patches() {
        let img = ImageTensor::filled(8, 8, 1, 0.0);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.nrows(), 4);
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = ImageTensor::filled(10, 10, 1, 0.0);
        assert!(matches!(patchify(&img, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn patches_reconstruct_pixels() {
        let img = ramp_image(8, 3);
        let p = patchify(&img, 4).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let (i, o) = pixel_to_patch_entry(y, x, c, 8, 3, 4);
                    assert_eq!(p[[i, o]], img.get(y, x, c));
                }
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let enc = Encoder::new(small_config(2)).unwrap();
        let img = ramp_image(8, 2);
        let a = enc.encode(&img).unwrap();
        let b = enc.encode(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 4);
    }

    #[test]
    fn depth_zero_tokens_are_local() {
        let enc = Encoder::new(small_config(0)).unwrap();
        let img = ramp_image(8, 2);
        let (_, base) = enc.encode(&img).unwrap();
        let mut changed = img.clone();
        changed.fill_patch(3, 4, 0.9);
        let (_, after) = enc.encode(&changed).unwrap();
        for i in 0..3 {
            assert_eq!(base.tokens.row(i), after.tokens.row(i));
        }
        assert_ne!(base.tokens.row(3), after.tokens.row(3));
    }

    #[test]
    fn wrong_shapes_are_a_contract_error() {
        let mut enc = Encoder::new(small_config(1)).unwrap();
        enc.cls = Array2::zeros((1, 3));
        assert!(matches!(enc.encode(&ramp_image(8, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn class_token_differencing() {
        let tokens = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let grid = TokenGrid::new(tokens.clone(), 2, 2, 4).unwrap();
        let cls = Array1::from(vec![1.0, 2.0, 3.0]);

        let same = TokenGrid::new(Array2::from_shape_fn((4, 3), |(_, j)| cls[j]), 2, 2, 4).unwrap();
        assert!(feature_tokens(&cls, &same, true).unwrap().tokens.iter().all(|&v| v == 0.0));
        assert_eq!(feature_tokens(&cls, &grid, false).unwrap(), grid);
        assert_eq!(feature_tokens(&Array1::zeros(3), &grid, true).unwrap(), grid);
        let diff = feature_tokens(&cls, &grid, true).unwrap();
        assert_eq!(diff.tokens[[2, 1]], tokens[[2, 1]] - 2.0);
    }

    #[test]
    fn grid_index_round_trip() {
        let grid = TokenGrid::new(Array2::zeros((6 * 5, 2)), 6, 5, 1).unwrap();
        for i in 0..grid.len() {
            let (r, c) = grid.coord(i);
            assert_eq!(grid.index(r, c), i);
        }
    }
}
