//! Toy multimodal transformer encoder.
//!
//! Images are cut into patches and linearly projected; text and instruction
//! tokens come from an embedding table; a learned absolute position embedding
//! is added and the sequence runs through pre-norm causal transformer blocks.
//! The embedding is read at the trailing end-of-line (Eol) token.
//!
//! Gradients are written out by hand: [`forward_batch`] keeps every
//! activation needed by [`backward_batch`], which accepts upstream gradients for the
//! Eol feature, the visual features, and the recorded Eol attention rows.

use ndarray::{s, Array1, Array2, Axis, Dimension};

use crate::error::{Error, Result};
use crate::numerics::{Distribution, Rng};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    /// 32x32 RGB images, 4px patches (64 visual tokens), 4 layers of width 64.
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 4,
            layers: 4,
            width: 64,
            heads: 4,
            ffn_width: 64,
            vocab_size: 64,
            max_len: 80,
        }
    }
}

impl ModelConfig {
    /// The gradient-check model: 4x4 grayscale images, 2px patches, 2 layers of width 8.
    pub fn tiny() -> Self {
        Self {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            layers: 2,
            width: 8,
            heads: 2,
            ffn_width: 16,
            vocab_size: 8,
            max_len: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            self.image_height,
            self.image_width,
            self.channels,
            self.patch_size,
            self.layers,
            self.width,
            self.heads,
            self.ffn_width,
            self.vocab_size,
            self.max_len,
        ];
        if nonzero.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::invalid("image dims must be divisible by the patch size"));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        Ok(())
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// The last vocabulary row is reserved for the Eol token.
    pub fn eol_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// H x W x C pixel grid with values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, pixels: vec![value; height * width * channels] }
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.pixels[(row * self.width + col) * self.channels + channel] = value;
    }
}

/// Cuts an image into `patch x patch` tiles in row-major tile order. Each row of
/// the result is one tile flattened as (row, col, channel).
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Array2<f64>> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible into {patch}px patches",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let dim = patch * patch * image.channels;
    let mut out = Array2::zeros((gh * gw, dim));
    for pr in 0..gh {
        for pc in 0..gw {
            let mut row = out.row_mut(pr * gw + pc);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..image.channels {
                        row[k] = image.get(pr * patch + y, pc * patch + x, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    /// Patch index into the image's row-major patch grid.
    Visual(usize),
    Text(u32),
    Instruction(u32),
    Eol,
}

/// Template-ordered input: visual tokens first, then text, then instruction, then one Eol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    n_visual: usize,
}

impl TokenSequence {
    /// Builds `[Visual x n_visual, Text.., Instruction.., Eol]`.
    pub fn build(n_visual: usize, text: &[u32], instruction: &[u32]) -> Result<Self> {
        if n_visual == 0 && text.is_empty() {
            return Err(Error::invalid("sequence needs an image or text"));
        }
        let mut tokens = Vec::with_capacity(n_visual + text.len() + instruction.len() + 1);
        tokens.extend((0..n_visual).map(Token::Visual));
        tokens.extend(text.iter().map(|&t| Token::Text(t)));
        tokens.extend(instruction.iter().map(|&t| Token::Instruction(t)));
        tokens.push(Token::Eol);
        Ok(Self { tokens, n_visual })
    }

    /// The degenerate single-position sequence.
    pub fn eol_only() -> Self {
        Self { tokens: vec![Token::Eol], n_visual: 0 }
    }

    /// Validates template order on an explicit token list.
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        if tokens.last() != Some(&Token::Eol) {
            return Err(Error::invalid("sequence must end with Eol"));
        }
        let n_visual = tokens.iter().take_while(|t| matches!(t, Token::Visual(_))).count();
        let mut stage = 0;
        for (i, t) in tokens.iter().enumerate() {
            let rank = match t {
                Token::Visual(p) => {
                    if *p != i {
                        return Err(Error::invalid("visual tokens must be in patch order"));
                    }
                    0
                }
                Token::Text(_) => 1,
                Token::Instruction(_) => 2,
                Token::Eol => 3,
            };
            if rank < stage || (rank == 3 && i + 1 != tokens.len()) {
                return Err(Error::invalid("tokens out of template order"));
            }
            stage = rank;
        }
        Ok(Self { tokens, n_visual })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Array1<f64>,
    pub lnf_beta: Array1<f64>,
    /// Projection used by the concat-project fusion, `2D -> D`.
    pub fuse_w: Array2<f64>,
    pub fuse_b: Array1<f64>,
}

/// Normal entries with standard deviation `1 / sqrt(fan_in)`.
fn normal_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Array2<f64> {
    let std = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || std * rng.normal())
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let f = config.ffn_width;
        let patch_w = normal_matrix(config.patch_dim(), d, config.patch_dim(), rng);
        let tok_emb = normal_matrix(config.vocab_size, d, d, rng);
        let pos_emb = normal_matrix(config.max_len, d, d, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                wq: normal_matrix(d, d, d, rng),
                wk: normal_matrix(d, d, d, rng),
                wv: normal_matrix(d, d, d, rng),
                wo: normal_matrix(d, d, d, rng),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                w1: normal_matrix(d, f, d, rng),
                b1: Array1::zeros(f),
                w2: normal_matrix(f, d, f, rng),
                b2: Array1::zeros(d),
            })
            .collect();
        // Stacked identities: concat-project starts out equal to additive fusion.
        let mut fuse_w = Array2::zeros((2 * d, d));
        for i in 0..d {
            fuse_w[[i, i]] = 1.0;
            fuse_w[[d + i, i]] = 1.0;
        }
        Ok(Self {
            config,
            patch_w,
            patch_b: Array1::zeros(d),
            tok_emb,
            pos_emb,
            layers,
            lnf_gamma: Array1::ones(d),
            lnf_beta: Array1::zeros(d),
            fuse_w,
            fuse_b: Array1::zeros(d),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, data| data.iter_mut().for_each(|v| *v = 0.0));
        out
    }

    /// Visits every tensor in checkpoint order with its name and shape.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        fn visit<D: Dimension>(
            f: &mut impl FnMut(&str, &[usize], &[f64]),
            name: &str,
            a: &ndarray::Array<f64, D>,
        ) {
            f(name, a.shape(), a.as_slice().expect("standard layout"));
        }
        visit(&mut f, "patch.weight", &self.patch_w);
        visit(&mut f, "patch.bias", &self.patch_b);
        visit(&mut f, "token_embedding", &self.tok_emb);
        visit(&mut f, "position_embedding", &self.pos_emb);
        for (l, layer) in self.layers.iter().enumerate() {
            visit(&mut f, &format!("layers.{l}.ln1.gamma"), &layer.ln1_gamma);
            visit(&mut f, &format!("layers.{l}.ln1.beta"), &layer.ln1_beta);
            visit(&mut f, &format!("layers.{l}.attn.wq"), &layer.wq);
            visit(&mut f, &format!("layers.{l}.attn.wk"), &layer.wk);
            visit(&mut f, &format!("layers.{l}.attn.wv"), &layer.wv);
            visit(&mut f, &format!("layers.{l}.attn.wo"), &layer.wo);
            visit(&mut f, &format!("layers.{l}.ln2.gamma"), &layer.ln2_gamma);
            visit(&mut f, &format!("layers.{l}.ln2.beta"), &layer.ln2_beta);
            visit(&mut f, &format!("layers.{l}.ffn.w1"), &layer.w1);
            visit(&mut f, &format!("layers.{l}.ffn.b1"), &layer.b1);
            visit(&mut f, &format!("layers.{l}.ffn.w2"), &layer.w2);
            visit(&mut f, &format!("layers.{l}.ffn.b2"), &layer.b2);
        }
        visit(&mut f, "final_norm.gamma", &self.lnf_gamma);
        visit(&mut f, "final_norm.beta", &self.lnf_beta);
        visit(&mut f, "fuse.weight", &self.fuse_w);
        visit(&mut f, "fuse.bias", &self.fuse_b);
    }

    /// Mutable counterpart of [`ModelParams::for_each`], same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        fn visit<D: Dimension>(
            f: &mut impl FnMut(&str, &mut [f64]),
            name: &str,
            a: &mut ndarray::Array<f64, D>,
        ) {
            f(name, a.as_slice_mut().expect("standard layout"));
        }
        visit(&mut f, "patch.weight", &mut self.patch_w);
        visit(&mut f, "patch.bias", &mut self.patch_b);
        visit(&mut f, "token_embedding", &mut self.tok_emb);
        visit(&mut f, "position_embedding", &mut self.pos_emb);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            visit(&mut f, &format!("layers.{l}.ln1.gamma"), &mut layer.ln1_gamma);
            visit(&mut f, &format!("layers.{l}.ln1.beta"), &mut layer.ln1_beta);
            visit(&mut f, &format!("layers.{l}.attn.wq"), &mut layer.wq);
            visit(&mut f, &format!("layers.{l}.attn.wk"), &mut layer.wk);
            visit(&mut f, &format!("layers.{l}.attn.wv"), &mut layer.wv);
            visit(&mut f, &format!("layers.{l}.attn.wo"), &mut layer.wo);
            visit(&mut f, &format!("layers.{l}.ln2.gamma"), &mut layer.ln2_gamma);
            visit(&mut f, &format!("layers.{l}.ln2.beta"), &mut layer.ln2_beta);
            visit(&mut f, &format!("layers.{l}.ffn.w1"), &mut layer.w1);
            visit(&mut f, &format!("layers.{l}.ffn.b1"), &mut layer.b1);
            visit(&mut f, &format!("layers.{l}.ffn.w2"), &mut layer.w2);
            visit(&mut f, &format!("layers.{l}.ffn.b2"), &mut layer.b2);
        }
        visit(&mut f, "final_norm.gamma", &mut self.lnf_gamma);
        visit(&mut f, "final_norm.beta", &mut self.lnf_beta);
        visit(&mut f, "fuse.weight", &mut self.fuse_w);
        visit(&mut f, "fuse.bias", &mut self.fuse_b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, d| n += d.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(|_, _, d| out.extend_from_slice(d));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.for_each_mut(|_, d| {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        });
        Ok(())
    }

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_mut(|_, d| {
            for v in d.iter_mut() {
                *v += flat[offset];
                offset += 1;
            }
        });
    }

    pub fn l2_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.for_each(|_, _, d| sq += d.iter().map(|v| v * v).sum::<f64>());
        sq.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Eol attention rows: `rows[layer][head]` is a distribution over all positions
/// up to and including the Eol position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub rows: Vec<Vec<Vec<f64>>>,
    pub n_visual: usize,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    /// Head-averaged Eol row of `layer` over every position.
    pub fn head_mean(&self, layer: usize) -> Result<Vec<f64>> {
        let heads = self
            .rows
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} not recorded")))?;
        let len = heads[0].len();
        let mut mean = vec![0.0; len];
        for row in heads {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let h = heads.len() as f64;
        mean.iter_mut().for_each(|m| *m /= h);
        Ok(mean)
    }

    /// Attention of the Eol token over the visual tokens at `layer` (0-based),
    /// head-averaged and renormalized.
    pub fn query_distribution(&self, layer: usize) -> Result<Distribution> {
        if self.n_visual == 0 {
            return Err(Error::invalid("no visual tokens in the sequence"));
        }
        let mean = self.head_mean(layer)?;
        Distribution::from_weights(mean[..self.n_visual].to_vec())
    }

    /// Pulls a gradient w.r.t. [`query_distribution`](Self::query_distribution) back onto
    /// the raw attention rows of `layer`; returns a `heads x seq_len` array.
    pub fn query_distribution_backward(&self, layer: usize, d_q: &[f64]) -> Result<Array2<f64>> {
        let q = self.query_distribution(layer)?;
        if d_q.len() != self.n_visual {
            return Err(Error::shape(format!("expected {} gradient entries, got {}", self.n_visual, d_q.len())));
        }
        let heads = &self.rows[layer];
        let h = heads.len();
        let mean = self.head_mean(layer)?;
        let total: f64 = mean[..self.n_visual].iter().sum();
        let inner: f64 = d_q.iter().zip(q.as_slice()).map(|(g, p)| g * p).sum();
        let mut out = Array2::zeros((h, heads[0].len()));
        for j in 0..self.n_visual {
            let g = (d_q[j] - inner) / (total * h as f64);
            for hd in 0..h {
                out[[hd, j]] = g;
            }
        }
        Ok(out)
    }
}

/// See [`AttentionRecord::query_distribution`].
pub fn attention_query_distribution(record: &AttentionRecord, layer: usize) -> Result<Distribution> {
    record.query_distribution(layer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Final-layer (normalized) hidden state at the Eol position.
    pub f_last: Array1<f64>,
    /// Final-layer hidden states at the visual positions, one row per patch.
    pub f_visual: Array2<f64>,
    pub attention: AttentionRecord,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerTape {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `probs[segment][head]`, each `len x len`
    probs: Vec<Vec<Array2<f64>>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    /// tanh term of the GELU, reused by the backward pass
    gelu_t: Array2<f64>,
    g: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    len: usize,
    n_visual: usize,
}

/// Activations kept by [`forward_batch`] for [`backward_batch`].
pub struct Tape {
    segments: Vec<Segment>,
    layers: Vec<LayerTape>,
    lnf: LnCache,
}

/// One encoder input: a template-ordered sequence plus its patches when it has visual tokens.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub seq: &'a TokenSequence,
    pub patches: Option<&'a Array2<f64>>,
}

impl<'a> EncoderInput<'a> {
    pub fn new(seq: &'a TokenSequence, patches: Option<&'a Array2<f64>>) -> Self {
        Self { seq, patches }
    }
}

/// Upstream gradients for [`backward_batch`]. Every field is optional.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub d_last: Option<Array1<f64>>,
    pub d_visual: Option<Array2<f64>>,
    /// Per layer: `heads x seq_len` gradient w.r.t. the Eol attention rows.
    pub d_attention: Vec<Option<Array2<f64>>>,
}

impl OutputGrads {
    pub fn new(layers: usize) -> Self {
        Self { d_last: None, d_visual: None, d_attention: vec![None; layers] }
    }

    pub(crate) fn attention_mut(&mut self, layer: usize, heads: usize, len: usize) -> &mut Array2<f64> {
        self.d_attention[layer].get_or_insert_with(|| Array2::zeros((heads, len)))
    }

    pub(crate) fn add_last(&mut self, d: &Array1<f64>) {
        match &mut self.d_last {
            Some(acc) => *acc += d,
            None => self.d_last = Some(d.clone()),
        }
    }

    pub(crate) fn add_visual(&mut self, d: &Array2<f64>) {
        match &mut self.d_visual {
            Some(acc) => *acc += d,
            None => self.d_visual = Some(d.clone()),
        }
    }
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let inv_d = 1.0 / d as f64;
    let mut xhat = Array2::zeros((rows, d));
    let mut y = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    let (g, b) = (gamma.as_slice().unwrap(), beta.as_slice().unwrap());
    for t in 0..rows {
        let xr = x.row(t);
        let xr = xr.as_slice().unwrap();
        let mean = xr.iter().sum::<f64>() * inv_d;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        let mut xh = xhat.row_mut(t);
        let xh = xh.as_slice_mut().unwrap();
        let mut yr = y.row_mut(t);
        let yr = yr.as_slice_mut().unwrap();
        for j in 0..d {
            let h = (xr[j] - mean) * r;
            xh[j] = h;
            yr[j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gamma;
    for (t, mut row) in dx.rows_mut().into_iter().enumerate() {
        let xh = cache.xhat.row(t);
        let mean_dh = row.sum() / d;
        let mean_dhx = row.dot(&xh) / d;
        let r = cache.rstd[t];
        ndarray::Zip::from(&mut row).and(&xh).for_each(|v, &x| *v = r * (*v - mean_dh - x * mean_dhx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh(u: f64) -> f64 {
    (GELU_C * (u + GELU_A * u * u * u)).tanh()
}

fn gelu_grad(u: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn check_input(params: &ModelParams, input: &EncoderInput) -> Result<()> {
    let cfg = &params.config;
    let seq = input.seq;
    if seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if seq.len() > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_len {}",
            seq.len(),
            cfg.max_len
        )));
    }
    match (seq.n_visual(), input.patches) {
        (0, _) => {}
        (n, Some(p)) if p.nrows() == n && p.ncols() == cfg.patch_dim() => {}
        (n, Some(p)) => {
            return Err(Error::shape(format!(
                "sequence has {n} visual tokens but patches are {}x{} (patch dim {})",
                p.nrows(),
                p.ncols(),
                cfg.patch_dim()
            )))
        }
        (n, None) => return Err(Error::invalid(format!("sequence has {n} visual tokens but no image"))),
    }
    for t in seq.tokens() {
        if let Token::Text(id) | Token::Instruction(id) = t {
            if *id as usize >= cfg.vocab_size - 1 {
                return Err(Error::invalid(format!(
                    "token id {id} outside vocabulary of {} (last id is Eol)",
                    cfg.vocab_size
                )));
            }
        }
    }
    Ok(())
}

fn token_row(cfg: &ModelConfig, tok: &Token) -> Option<usize> {
    match tok {
        Token::Visual(_) => None,
        Token::Text(id) | Token::Instruction(id) => Some(*id as usize),
        Token::Eol => Some(cfg.eol_id() as usize),
    }
}

/// Stacks the patches of every input with visual tokens, in input order.
fn stacked_patches(cfg: &ModelConfig, inputs: &[EncoderInput], segments: &[Segment]) -> Option<Array2<f64>> {
    let total: usize = segments.iter().map(|s| s.n_visual).sum();
    if total == 0 {
        return None;
    }
    let mut out = Array2::zeros((total, cfg.patch_dim()));
    let mut row = 0;
    for (input, seg) in inputs.iter().zip(segments) {
        if let (Some(p), n) = (input.patches, seg.n_visual) {
            if n > 0 {
                out.slice_mut(s![row..row + n, ..]).assign(p);
                row += n;
            }
        }
    }
    Some(out)
}

fn embed(params: &ModelParams, inputs: &[EncoderInput], segments: &[Segment], total: usize) -> Array2<f64> {
    let cfg = &params.config;
    let mut x = Array2::zeros((total, cfg.width));
    if let Some(patches) = stacked_patches(cfg, inputs, segments) {
        let proj = patches.dot(&params.patch_w) + &params.patch_b;
        let mut row = 0;
        for seg in segments.iter().filter(|s| s.n_visual > 0) {
            x.slice_mut(s![seg.start..seg.start + seg.n_visual, ..])
                .assign(&proj.slice(s![row..row + seg.n_visual, ..]));
            row += seg.n_visual;
        }
    }
    for (input, seg) in inputs.iter().zip(segments) {
        for (t, tok) in input.seq.tokens().iter().enumerate() {
            let mut row = x.row_mut(seg.start + t);
            if let Some(id) = token_row(cfg, tok) {
                row += &params.tok_emb.row(id);
            }
            row += &params.pos_emb.row(t);
        }
    }
    x
}

/// Runs the encoder on one sequence.
pub fn forward(params: &ModelParams, seq: &TokenSequence, patches: Option<&Array2<f64>>) -> Result<ForwardOutput> {
    let (mut outs, _) = forward_batch(params, &[EncoderInput::new(seq, patches)])?;
    Ok(outs.pop().expect("one output"))
}

/// Single-sequence form of [`forward_batch`].
pub fn forward_with_tape(
    params: &ModelParams,
    seq: &TokenSequence,
    patches: Option<&Array2<f64>>,
) -> Result<(ForwardOutput, Tape)> {
    let (mut outs, tape) = forward_batch(params, &[EncoderInput::new(seq, patches)])?;
    Ok((outs.pop().expect("one output"), tape))
}

/// Runs the encoder on several independent sequences at once.
///
/// Rows of all sequences are stacked so the dense projections run as one
/// matrix product per weight; attention stays within each sequence. The
/// outputs equal those of running [`forward`] on each input separately.
pub fn forward_batch(params: &ModelParams, inputs: &[EncoderInput]) -> Result<(Vec<ForwardOutput>, Tape)> {
    let cfg = &params.config;
    let mut segments = Vec::with_capacity(inputs.len());
    let mut total = 0;
    for input in inputs {
        check_input(params, input)?;
        segments.push(Segment { start: total, len: input.seq.len(), n_visual: input.seq.n_visual() });
        total += input.seq.len();
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = embed(params, inputs, &segments, total);
    let mut tapes = Vec::with_capacity(cfg.layers);
    // rows[segment][layer][head]
    let mut rows: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::with_capacity(cfg.layers); inputs.len()];

    for layer in &params.layers {
        let (h1, ln1) = layer_norm(&x, &layer.ln1_gamma, &layer.ln1_beta);
        let q = h1.dot(&layer.wq);
        let k = h1.dot(&layer.wk);
        let v = h1.dot(&layer.wv);
        let mut ctx = Array2::zeros((total, cfg.width));
        let mut probs = Vec::with_capacity(segments.len());
        for (si, seg) in segments.iter().enumerate() {
            let t_len = seg.len;
            let rs = seg.start..seg.start + t_len;
            let mut seg_probs = Vec::with_capacity(cfg.heads);
            let mut eol_rows = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rs.clone(), cols.clone()]);
                let kh = k.slice(s![rs.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for i in 0..t_len {
                    let mut row = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    }
                    for j in 0..t_len {
                        row[j] = if j <= i { row[j] / sum } else { 0.0 };
                    }
                }
                ctx.slice_mut(s![rs.clone(), cols.clone()])
                    .assign(&p.dot(&v.slice(s![rs.clone(), cols])));
                eol_rows.push(p.row(t_len - 1).to_vec());
                seg_probs.push(p);
            }
            rows[si].push(eol_rows);
            probs.push(seg_probs);
        }
        let attn_out = ctx.dot(&layer.wo);
        let x2 = &x + &attn_out;
        let (h2, ln2) = layer_norm(&x2, &layer.ln2_gamma, &layer.ln2_beta);
        let u = h2.dot(&layer.w1) + &layer.b1;
        let gelu_t = u.mapv(gelu_tanh);
        let mut g = u.clone();
        ndarray::Zip::from(&mut g).and(&gelu_t).for_each(|g, &t| *g = 0.5 * *g * (1.0 + t));
        let ff = g.dot(&layer.w2) + &layer.b2;
        x = x2 + ff;
        tapes.push(LayerTape { ln1, h1, q, k, v, probs, ctx, ln2, h2, u, gelu_t, g });
    }

    let (y, lnf) = layer_norm(&x, &params.lnf_gamma, &params.lnf_beta);
    let outs = segments
        .iter()
        .zip(rows)
        .map(|(seg, rows)| ForwardOutput {
            f_last: y.row(seg.start + seg.len - 1).to_owned(),
            f_visual: y.slice(s![seg.start..seg.start + seg.n_visual, ..]).to_owned(),
            attention: AttentionRecord { rows, n_visual: seg.n_visual },
        })
        .collect();
    Ok((outs, Tape { segments, layers: tapes, lnf }))
}

/// Single-sequence form of [`backward_batch`].
pub fn backward(
    params: &ModelParams,
    seq: &TokenSequence,
    patches: Option<&Array2<f64>>,
    tape: &Tape,
    upstream: &OutputGrads,
    grads: &mut ModelParams,
) -> Result<()> {
    backward_batch(params, &[EncoderInput::new(seq, patches)], tape, std::slice::from_ref(upstream), grads)
}

/// Accumulates parameter gradients into `grads` given upstream gradients on
/// the outputs of a [`forward_batch`] call over the same inputs.
pub fn backward_batch(
    params: &ModelParams,
    inputs: &[EncoderInput],
    tape: &Tape,
    upstream: &[OutputGrads],
    grads: &mut ModelParams,
) -> Result<()> {
    let cfg = &params.config;
    if inputs.len() != tape.segments.len() || upstream.len() != inputs.len() {
        return Err(Error::shape("backward inputs do not match the tape"));
    }
    let total: usize = tape.segments.iter().map(|s| s.len).sum();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dy = Array2::zeros((total, cfg.width));
    for (seg, up) in tape.segments.iter().zip(upstream) {
        if let Some(d) = &up.d_last {
            if d.len() != cfg.width {
                return Err(Error::shape("d_last width"));
            }
            dy.row_mut(seg.start + seg.len - 1).assign(d);
        }
        if let Some(d) = &up.d_visual {
            if d.dim() != (seg.n_visual, cfg.width) {
                return Err(Error::shape("d_visual dims"));
            }
            dy.slice_mut(s![seg.start..seg.start + seg.n_visual, ..]).assign(d);
        }
        for d in up.d_attention.iter().flatten() {
            if d.dim() != (cfg.heads, seg.len) {
                return Err(Error::shape("d_attention dims"));
            }
        }
    }
    let mut dx = layer_norm_backward(&dy, &tape.lnf, &params.lnf_gamma, &mut grads.lnf_gamma, &mut grads.lnf_beta);

    for l in (0..cfg.layers).rev() {
        let lp = &params.layers[l];
        let tp = &tape.layers[l];
        let gl = &mut grads.layers[l];

        // feed-forward branch
        gl.w2 += &tp.g.t().dot(&dx);
        gl.b2 += &dx.sum_axis(Axis(0));
        let mut du = dx.dot(&lp.w2.t());
        ndarray::Zip::from(&mut du)
            .and(&tp.u)
            .and(&tp.gelu_t)
            .for_each(|d, &u, &t| *d *= gelu_grad(u, t));
        gl.w1 += &tp.h2.t().dot(&du);
        gl.b1 += &du.sum_axis(Axis(0));
        let dh2 = du.dot(&lp.w1.t());
        let dx2 = &dx + &layer_norm_backward(&dh2, &tp.ln2, &lp.ln2_gamma, &mut gl.ln2_gamma, &mut gl.ln2_beta);

        // attention branch
        gl.wo += &tp.ctx.t().dot(&dx2);
        let dctx = dx2.dot(&lp.wo.t());
        let mut dq = Array2::zeros((total, cfg.width));
        let mut dk = Array2::zeros((total, cfg.width));
        let mut dv = Array2::zeros((total, cfg.width));
        for (si, seg) in tape.segments.iter().enumerate() {
            let t_len = seg.len;
            let rs = seg.start..seg.start + t_len;
            let extra = upstream[si].d_attention.get(l).and_then(|o| o.as_ref());
            for h in 0..cfg.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &tp.probs[si][h];
                let dctx_h = dctx.slice(s![rs.clone(), cols.clone()]);
                let mut ds = dctx_h.dot(&tp.v.slice(s![rs.clone(), cols.clone()]).t());
                dv.slice_mut(s![rs.clone(), cols.clone()]).assign(&p.t().dot(&dctx_h));
                if let Some(extra) = extra {
                    let mut last = ds.row_mut(t_len - 1);
                    last += &extra.row(h);
                }
                // softmax backward, row by row
                for i in 0..t_len {
                    let pr = p.row(i);
                    let mut row = ds.row_mut(i);
                    let inner: f64 = (0..=i).map(|j| pr[j] * row[j]).sum();
                    for j in 0..t_len {
                        row[j] = if j <= i { pr[j] * (row[j] - inner) * scale } else { 0.0 };
                    }
                }
                dq.slice_mut(s![rs.clone(), cols.clone()])
                    .assign(&ds.dot(&tp.k.slice(s![rs.clone(), cols.clone()])));
                dk.slice_mut(s![rs.clone(), cols.clone()])
                    .assign(&ds.t().dot(&tp.q.slice(s![rs.clone(), cols])));
            }
        }
        let h1t = tp.h1.t();
        gl.wq += &h1t.dot(&dq);
        gl.wk += &h1t.dot(&dk);
        gl.wv += &h1t.dot(&dv);
        let dh1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        dx = dx2 + layer_norm_backward(&dh1, &tp.ln1, &lp.ln1_gamma, &mut gl.ln1_gamma, &mut gl.ln1_beta);
    }

    // embeddings
    if let Some(patches) = stacked_patches(cfg, inputs, &tape.segments) {
        let mut dvis = Array2::zeros((patches.nrows(), cfg.width));
        let mut row = 0;
        for seg in tape.segments.iter().filter(|s| s.n_visual > 0) {
            dvis.slice_mut(s![row..row + seg.n_visual, ..])
                .assign(&dx.slice(s![seg.start..seg.start + seg.n_visual, ..]));
            row += seg.n_visual;
        }
        grads.patch_w += &patches.t().dot(&dvis);
        grads.patch_b += &dvis.sum_axis(Axis(0));
    }
    for (input, seg) in inputs.iter().zip(&tape.segments) {
        for (t, tok) in input.seq.tokens().iter().enumerate() {
            let row = dx.row(seg.start + t);
            if let Some(id) = token_row(cfg, tok) {
                let mut e = grads.tok_emb.row_mut(id);
                e += &row;
            }
            let mut pe = grads.pos_emb.row_mut(t);
            pe += &row;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_gradient;

    fn random_image(cfg: &ModelConfig, rng: &mut Rng) -> ImageTensor {
        let n = cfg.image_height * cfg.image_width * cfg.channels;
        ImageTensor::new(cfg.image_height, cfg.image_width, cfg.channels, (0..n).map(|_| rng.uniform()).collect())
            .unwrap()
    }

    #[test]
    fn patchify_shapes() {
        let img = ImageTensor::filled(8, 8, 1, 0.5);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.dim(), (4, 16));
        for r in 1..4 {
            assert_eq!(p.row(r), p.row(0));
        }
        let big = ImageTensor::filled(32, 32, 3, 0.0);
        assert_eq!(patchify(&big, 4).unwrap().nrows(), 64);
        assert!(patchify(&ImageTensor::filled(6, 8, 1, 0.0), 4).is_err());
    }

    #[test]
    fn patchify_row_major_order() {
        let mut img = ImageTensor::filled(4, 4, 1, 0.0);
        img.set(0, 2, 0, 1.0); // tile (0,1)
        img.set(3, 1, 0, 0.5); // tile (1,0), local (1,1)
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p[[1, 0]], 1.0);
        assert_eq!(p[[2, 3]], 0.5);
    }

    #[test]
    fn sequence_templates() {
        let img_only = TokenSequence::build(3, &[], &[9]).unwrap();
        assert_eq!(
            img_only.tokens(),
            &[Token::Visual(0), Token::Visual(1), Token::Visual(2), Token::Instruction(9), Token::Eol]
        );
        let text_only = TokenSequence::build(0, &[4, 5], &[9]).unwrap();
        assert_eq!(text_only.tokens(), &[Token::Text(4), Token::Text(5), Token::Instruction(9), Token::Eol]);
        let both = TokenSequence::build(2, &[4], &[9]).unwrap();
        assert_eq!(
            both.tokens(),
            &[Token::Visual(0), Token::Visual(1), Token::Text(4), Token::Instruction(9), Token::Eol]
        );
        assert!(TokenSequence::build(0, &[], &[9]).is_err());
        assert!(TokenSequence::from_tokens(vec![Token::Text(1), Token::Visual(0), Token::Eol]).is_err());
        assert!(TokenSequence::from_tokens(vec![Token::Eol, Token::Text(1)]).is_err());
        assert_eq!(TokenSequence::from_tokens(both.tokens().to_vec()).unwrap(), both);
    }

    #[test]
    fn eol_only_forward() {
        let params = ModelParams::init(ModelConfig::tiny(), &mut Rng::new(0)).unwrap();
        let out = forward(&params, &TokenSequence::eol_only(), None).unwrap();
        assert_eq!(out.f_visual.nrows(), 0);
        for layer in &out.attention.rows {
            for row in layer {
                assert_eq!(row, &vec![1.0]);
            }
        }
        assert!(out.attention.query_distribution(0).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_position_aware() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(3);
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        let img = random_image(&cfg, &mut rng);
        let patches = patchify(&img, cfg.patch_size).unwrap();
        let seq = TokenSequence::build(4, &[1, 2], &[3]).unwrap();
        let a = forward(&params, &seq, Some(&patches)).unwrap();
        let b = forward(&params, &seq, Some(&patches)).unwrap();
        assert_eq!(a, b);
        let swapped = TokenSequence::build(4, &[2, 1], &[3]).unwrap();
        let c = forward(&params, &swapped, Some(&patches)).unwrap();
        assert_ne!(a.f_last, c.f_last);
    }

    #[test]
    fn forward_rejects_bad_ids() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, &mut Rng::new(0)).unwrap();
        let seq = TokenSequence::build(0, &[cfg.eol_id()], &[]).unwrap();
        assert!(forward(&params, &seq, None).is_err());
        let seq = TokenSequence::build(0, &[100], &[]).unwrap();
        assert!(forward(&params, &seq, None).is_err());
        let seq = TokenSequence::build(4, &[1], &[]).unwrap();
        assert!(forward(&params, &seq, None).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(5);
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        let patches = patchify(&random_image(&cfg, &mut rng), cfg.patch_size).unwrap();
        let seq = TokenSequence::build(4, &[1], &[2]).unwrap();
        let out = forward(&params, &seq, Some(&patches)).unwrap();
        for layer in &out.attention.rows {
            for row in layer {
                assert_eq!(row.len(), seq.len());
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
        for l in 0..cfg.layers {
            let q = out.attention.query_distribution(l).unwrap();
            assert_eq!(q.len(), 4);
        }
    }

    #[test]
    fn query_distribution_averages_heads() {
        let rec = AttentionRecord { rows: vec![vec![vec![0.2, 0.8], vec![0.6, 0.4]]], n_visual: 2 };
        let q = rec.query_distribution(0).unwrap();
        assert!((q.as_slice()[0] - 0.4).abs() < 1e-15);
        assert!((q.as_slice()[1] - 0.6).abs() < 1e-15);
        let single = AttentionRecord { rows: vec![vec![vec![0.3, 0.7]]], n_visual: 1 };
        assert_eq!(single.query_distribution(0).unwrap().as_slice(), &[1.0]);
    }

    /// A scalar touching every output path: Eol feature, visual features and attention rows.
    fn probe(out: &ForwardOutput, w_last: &[f64], w_vis: &Array2<f64>, w_att: &[Array2<f64>]) -> f64 {
        let mut s: f64 = out.f_last.iter().zip(w_last).map(|(a, b)| a * b).sum();
        s += (&out.f_visual * w_vis).sum();
        for (l, w) in w_att.iter().enumerate() {
            for (h, row) in out.attention.rows[l].iter().enumerate() {
                s += row.iter().zip(w.row(h)).map(|(a, b)| (a * b).sin()).sum::<f64>();
            }
        }
        s
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(11);
        let mut params = ModelParams::init(cfg, &mut rng).unwrap();
        // larger weights so every path carries signal
        let flat: Vec<f64> = params.to_flat().iter().map(|v| v + 0.3 * rng.normal()).collect();
        params.set_flat(&flat).unwrap();
        let patches = patchify(&random_image(&cfg, &mut rng), cfg.patch_size).unwrap();
        let seq = TokenSequence::build(4, &[1, 2], &[3]).unwrap();
        let t = seq.len();
        let w_last: Vec<f64> = (0..cfg.width).map(|_| rng.normal()).collect();
        let w_vis = Array2::from_shape_simple_fn((4, cfg.width), || rng.normal());
        let w_att: Vec<Array2<f64>> =
            (0..cfg.layers).map(|_| Array2::from_shape_simple_fn((cfg.heads, t), || rng.normal())).collect();

        let (out, tape) = forward_with_tape(&params, &seq, Some(&patches)).unwrap();
        let mut up = OutputGrads::new(cfg.layers);
        up.d_last = Some(Array1::from(w_last.clone()));
        up.d_visual = Some(w_vis.clone());
        for l in 0..cfg.layers {
            let mut d = Array2::zeros((cfg.heads, t));
            for h in 0..cfg.heads {
                for j in 0..t {
                    let w = w_att[l][[h, j]];
                    d[[h, j]] = w * (out.attention.rows[l][h][j] * w).cos();
                }
            }
            up.d_attention[l] = Some(d);
        }
        let mut grads = params.zeros_like();
        backward(&params, &seq, Some(&patches), &tape, &up, &mut grads).unwrap();
        let analytic = grads.to_flat();

        let theta = params.to_flat();
        let mut scratch = params.clone();
        let numeric = finite_diff_gradient(
            |th| {
                scratch.set_flat(th).unwrap();
                let o = forward(&scratch, &seq, Some(&patches)).unwrap();
                probe(&o, &w_last, &w_vis, &w_att)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn batched_forward_and_backward_match_single() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(21);
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        let p1 = patchify(&random_image(&cfg, &mut rng), cfg.patch_size).unwrap();
        let p2 = patchify(&random_image(&cfg, &mut rng), cfg.patch_size).unwrap();
        let s1 = TokenSequence::build(4, &[1], &[2]).unwrap();
        let s2 = TokenSequence::build(0, &[3, 4], &[2]).unwrap();
        let s3 = TokenSequence::build(4, &[], &[5]).unwrap();
        let inputs = [
            EncoderInput::new(&s1, Some(&p1)),
            EncoderInput::new(&s2, None),
            EncoderInput::new(&s3, Some(&p2)),
        ];
        let (outs, tape) = forward_batch(&params, &inputs).unwrap();
        let mut ups = Vec::new();
        let mut single_grads = params.zeros_like();
        for (input, out) in inputs.iter().zip(&outs) {
            let (solo, solo_tape) = forward_with_tape(&params, input.seq, input.patches).unwrap();
            assert!((&solo.f_last - &out.f_last).iter().all(|d| d.abs() < 1e-12));
            assert!((&solo.f_visual - &out.f_visual).iter().all(|d| d.abs() < 1e-12));
            let mut up = OutputGrads::new(cfg.layers);
            up.d_last = Some(Array1::from_shape_simple_fn(cfg.width, || rng.normal()));
            if input.seq.n_visual() > 0 {
                up.d_visual = Some(Array2::from_shape_simple_fn((4, cfg.width), || rng.normal()));
            }
            *up.attention_mut(1, cfg.heads, input.seq.len()) =
                Array2::from_shape_simple_fn((cfg.heads, input.seq.len()), || rng.normal());
            backward(&params, input.seq, input.patches, &solo_tape, &up, &mut single_grads).unwrap();
            ups.push(up);
        }
        let mut batch_grads = params.zeros_like();
        backward_batch(&params, &inputs, &tape, &ups, &mut batch_grads).unwrap();
        for (a, b) in single_grads.to_flat().iter().zip(batch_grads.to_flat()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
