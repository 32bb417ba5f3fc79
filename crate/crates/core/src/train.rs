//! Training: batch encoding with optional feature regeneration, the combined
//! objective and its gradient, an Adam optimizer, checkpoints, and a
//! finite-difference gradient check.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::datagen::{candidate_sequence, Corpus, TrainSample};
use crate::error::{Error, Result};
use crate::io::{self, NamedTensor};
use crate::losses::{
    infonce_with_grad, mean_sga, sga_loss_with_grad, total_loss, AlignmentLayers, BatchEmbeddings, LossConfig,
};
use crate::model::{
    backward_batch, forward_batch, patchify, EncoderInput, ForwardOutput, ImageTensor, ModelConfig, ModelParams,
    OutputGrads, TokenSequence,
};
use crate::numerics::{finite_diff_gradient, Distribution, Rng};
use crate::saliency::{PipelineConfig, SaliencyTarget};
use crate::sdr::{fuse, fuse_backward, regenerate_backward, regenerate_with_cache, FusionMode, Regenerated, SdrConfig, TopK};

/// Which of the two additions are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    SgaOnly,
    SdrOnly,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::SgaOnly, Mode::SdrOnly, Mode::Full];

    pub fn uses_sga(self) -> bool {
        matches!(self, Mode::SgaOnly | Mode::Full)
    }

    pub fn uses_sdr(self) -> bool {
        matches!(self, Mode::SdrOnly | Mode::Full)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" | "base" => Ok(Mode::Baseline),
            "sga" | "sga_only" => Ok(Mode::SgaOnly),
            "sdr" | "sdr_only" => Ok(Mode::SdrOnly),
            "full" => Ok(Mode::Full),
            other => Err(Error::invalid(format!("unknown mode '{other}' (baseline|sga|sdr|full)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::SgaOnly => "sga",
            Mode::SdrOnly => "sdr",
            Mode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sdr: SdrConfig,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            mode: Mode::Full,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sdr: SdrConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be >= 2 for in-batch negatives"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.sdr.validate()?;
        self.pipeline.validate()?;
        if self.pipeline.patch_size != self.model.patch_size {
            return Err(Error::invalid("saliency patch size differs from the model patch size"));
        }
        Ok(())
    }

    /// Regeneration settings in effect, or `None` for plain Eol embeddings.
    pub fn active_sdr(&self) -> Option<SdrConfig> {
        self.mode.uses_sdr().then_some(self.sdr)
    }
}

/// Side of the retrieval pair an input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Candidate,
}

struct EmbedCache {
    f_hat: Option<(Regenerated, Array1<f64>)>,
}

/// Final embedding of one encoded input.
fn embed_output(
    params: &ModelParams,
    out: &ForwardOutput,
    side: Side,
    sdr: Option<&SdrConfig>,
) -> Result<(Array1<f64>, EmbedCache)> {
    let sdr = sdr.filter(|c| out.attention.n_visual > 0 && (side == Side::Query || c.apply_to_candidates));
    match sdr {
        Some(c) if c.fusion != FusionMode::Base => {
            let last = out.attention.num_layers() - 1;
            let q_hat = out.attention.query_distribution(last)?;
            let regen = regenerate_with_cache(q_hat.as_slice(), &out.f_visual, c)?;
            let emb = fuse(&out.f_last, &regen.feature, c.fusion, params)?;
            let f_hat = regen.feature.clone();
            Ok((emb, EmbedCache { f_hat: Some((regen, f_hat)) }))
        }
        _ => Ok((out.f_last.clone(), EmbedCache { f_hat: None })),
    }
}

fn embed_backward(
    params: &ModelParams,
    out: &ForwardOutput,
    cache: &EmbedCache,
    d_emb: &Array1<f64>,
    sdr: Option<&SdrConfig>,
    upstream: &mut OutputGrads,
    grads: &mut ModelParams,
) -> Result<()> {
    match (&cache.f_hat, sdr) {
        (Some((regen, f_hat)), Some(c)) => {
            let (d_last, d_hat) = fuse_backward(&out.f_last, f_hat, d_emb, c.fusion, params, grads);
            upstream.add_last(&d_last);
            let (d_scores, d_visual) = regenerate_backward(regen, &out.f_visual, &d_hat, c.tau);
            upstream.add_visual(&d_visual);
            let last = out.attention.num_layers() - 1;
            let d_rows = out.attention.query_distribution_backward(last, &d_scores)?;
            *upstream.attention_mut(last, d_rows.nrows(), d_rows.ncols()) += &d_rows;
        }
        _ => upstream.add_last(d_emb),
    }
    Ok(())
}

/// Encodes inputs in one packed batch and returns their embeddings.
pub fn embed_batch(
    params: &ModelParams,
    inputs: &[EncoderInput],
    sides: &[Side],
    sdr: Option<&SdrConfig>,
) -> Result<(Vec<Array1<f64>>, Vec<ForwardOutput>)> {
    let (outs, _) = forward_batch(params, inputs)?;
    let mut embs = Vec::with_capacity(outs.len());
    for (out, &side) in outs.iter().zip(sides) {
        embs.push(embed_output(params, out, side, sdr)?.0);
    }
    Ok((embs, outs))
}

/// What one batch contributes to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_con: f64,
    pub l_sg: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub valid_targets: usize,
}

/// Encoder-ready view of a batch sample.
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub query_seq: TokenSequence,
    pub query_patches: Option<&'a Array2<f64>>,
    pub candidate_seq: TokenSequence,
    pub candidate_patches: &'a Array2<f64>,
    pub target: Option<&'a Distribution>,
}

impl<'a> BatchItem<'a> {
    pub fn from_sample(sample: &'a TrainSample, n_visual: usize) -> Result<Self> {
        Ok(Self {
            id: &sample.id,
            query_seq: sample.query_sequence(n_visual)?,
            query_patches: sample.query_image.as_ref().map(|q| &q.patches),
            candidate_seq: candidate_sequence(n_visual)?,
            candidate_patches: &sample.positive.patches,
            target: sample.target.as_ref().and_then(SaliencyTarget::target),
        })
    }
}

/// Total loss of a batch and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[BatchItem],
    mode: Mode,
    loss: &LossConfig,
    sdr: &SdrConfig,
) -> Result<(StepMetrics, ModelParams)> {
    let b = batch.len();
    let sdr = mode.uses_sdr().then_some(sdr);
    let mut inputs = Vec::with_capacity(2 * b);
    let mut sides = Vec::with_capacity(2 * b);
    for item in batch {
        inputs.push(EncoderInput::new(&item.query_seq, item.query_patches));
        sides.push(Side::Query);
    }
    for item in batch {
        inputs.push(EncoderInput::new(&item.candidate_seq, Some(item.candidate_patches)));
        sides.push(Side::Candidate);
    }
    let (outs, tape) = forward_batch(params, &inputs)?;
    let mut embs = Vec::with_capacity(2 * b);
    let mut caches = Vec::with_capacity(2 * b);
    for (out, &side) in outs.iter().zip(&sides) {
        let (e, c) = embed_output(params, out, side, sdr)?;
        embs.push(e);
        caches.push(c);
    }
    let emb_batch = BatchEmbeddings {
        queries: embs[..b].iter().map(|e| e.to_vec()).collect(),
        candidates: embs[b..].iter().map(|e| e.to_vec()).collect(),
    };
    let con = infonce_with_grad(&emb_batch, loss.tau_con)?;

    let mut upstream: Vec<OutputGrads> = (0..2 * b).map(|_| OutputGrads::new(params.config.layers)).collect();
    let mut grads = params.zeros_like();

    let mut sga_values = Vec::new();
    let mut sga_grads = Vec::new();
    if mode.uses_sga() {
        for (i, item) in batch.iter().enumerate() {
            if let (Some(target), true) = (item.target, item.query_seq.n_visual() > 0) {
                let g = sga_loss_with_grad(&outs[i].attention, target, loss)
                    .map_err(|e| e.for_sample(item.id))?;
                sga_values.push(g.loss);
                sga_grads.push((i, g.d_rows));
            }
        }
    }
    let l_sg = mean_sga(&sga_values);
    let l_total = total_loss(con.loss, l_sg, loss.alpha);
    if !l_total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (l_con={}, l_sg={:?}, samples {:?})",
            con.loss,
            l_sg,
            batch.iter().map(|i| i.id).collect::<Vec<_>>()
        )));
    }
    let sga_scale = loss.alpha / sga_values.len().max(1) as f64;
    for (i, d_rows) in sga_grads {
        for (layer, d) in d_rows {
            *upstream[i].attention_mut(layer, d.nrows(), d.ncols()) += &(d * sga_scale);
        }
    }

    for k in 0..2 * b {
        let d = if k < b { &con.d_queries[k] } else { &con.d_candidates[k - b] };
        let d = Array1::from(d.clone());
        embed_backward(params, &outs[k], &caches[k], &d, sdr, &mut upstream[k], &mut grads)?;
    }
    backward_batch(params, &inputs, &tape, &upstream, &mut grads)?;
    let metrics = StepMetrics {
        step: 0,
        l_con: con.loss,
        l_sg: l_sg.unwrap_or(0.0),
        l_total,
        grad_norm: grads.l2_norm(),
        valid_targets: sga_values.len(),
    };
    Ok((metrics, grads))
}

/// Adam moments, one per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let g = grads.to_flat();
        let mut m = self.m.to_flat();
        let mut v = self.v.to_flat();
        let mut p = params.to_flat();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        self.m.set_flat(&m).expect("same layout");
        self.v.set_flat(&v).expect("same layout");
        params.set_flat(&p).expect("same layout");
    }
}

pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[BatchItem],
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let (mut metrics, grads) = loss_and_grad(params, batch, config.mode, &config.loss, &config.sdr)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    opt.update(params, &grads, config.learning_rate);
    metrics.step = opt.step;
    Ok(metrics)
}

const CONFIG_FIELDS: usize = 10;

fn config_tensor(c: &ModelConfig) -> NamedTensor {
    let v = [
        c.image_height,
        c.image_width,
        c.channels,
        c.patch_size,
        c.layers,
        c.width,
        c.heads,
        c.ffn_width,
        c.vocab_size,
        c.max_len,
    ];
    NamedTensor { name: "meta.config".into(), dims: vec![CONFIG_FIELDS], data: v.iter().map(|&x| x as f64).collect() }
}

fn config_from_tensor(t: &NamedTensor) -> Result<ModelConfig> {
    if t.data.len() != CONFIG_FIELDS || t.data.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(Error::invalid("malformed model config record"));
    }
    let u: Vec<usize> = t.data.iter().map(|&v| v as usize).collect();
    let c = ModelConfig {
        image_height: u[0],
        image_width: u[1],
        channels: u[2],
        patch_size: u[3],
        layers: u[4],
        width: u[5],
        heads: u[6],
        ffn_width: u[7],
        vocab_size: u[8],
        max_len: u[9],
    };
    c.validate()?;
    Ok(c)
}

fn params_tensors(prefix: &str, p: &ModelParams, out: &mut Vec<NamedTensor>) {
    p.for_each(|name, shape, data| {
        out.push(NamedTensor { name: format!("{prefix}{name}"), dims: shape.to_vec(), data: data.to_vec() })
    });
}

fn fill_params(prefix: &str, target: &mut ModelParams, tensors: &[NamedTensor]) -> Result<()> {
    let mut shapes = Vec::new();
    target.for_each(|name, shape, _| shapes.push((name.to_string(), shape.to_vec())));
    for (name, shape) in &shapes {
        let full = format!("{prefix}{name}");
        let t = tensors
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor '{full}'")))?;
        if &t.dims != shape {
            return Err(Error::shape(format!("tensor '{full}' has dims {:?}, expected {shape:?}", t.dims)));
        }
    }
    let mut err = None;
    target.for_each_mut(|name, data| {
        let full = format!("{prefix}{name}");
        if let Some(t) = tensors.iter().find(|t| t.name == full) {
            data.copy_from_slice(&t.data);
        } else {
            err = Some(full);
        }
    });
    match err {
        Some(n) => Err(Error::invalid(format!("checkpoint lacks tensor '{n}'"))),
        None => Ok(()),
    }
}

/// Parameters and (optionally) optimizer state as stored on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

pub fn checkpoint_tensors(params: &ModelParams, opt: Option<&OptimizerState>) -> Vec<NamedTensor> {
    let mut out = vec![config_tensor(&params.config)];
    params_tensors("", params, &mut out);
    if let Some(o) = opt {
        out.push(NamedTensor { name: "optim.step".into(), dims: vec![1], data: vec![o.step as f64] });
        params_tensors("optim.m.", &o.m, &mut out);
        params_tensors("optim.v.", &o.v, &mut out);
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, opt: Option<&OptimizerState>) -> Result<()> {
    io::write_checkpoint(path, &checkpoint_tensors(params, opt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::invalid(format!("checkpoint not found: {}", path.display())));
    }
    let tensors = io::read_checkpoint(path)?;
    let meta = tensors
        .iter()
        .find(|t| t.name == "meta.config")
        .ok_or_else(|| Error::format(path, "missing meta.config"))?;
    let config = config_from_tensor(meta).map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = ModelParams::init(config, &mut Rng::new(0))?;
    fill_params("", &mut params, &tensors).map_err(|e| Error::format(path, e.to_string()))?;
    let optimizer = match tensors.iter().find(|t| t.name == "optim.step") {
        Some(step) => {
            let mut o = OptimizerState::new(&params);
            o.step = step.data.first().copied().unwrap_or(0.0) as u64;
            fill_params("optim.m.", &mut o.m, &tensors).map_err(|e| Error::format(path, e.to_string()))?;
            fill_params("optim.v.", &mut o.v, &tensors).map_err(|e| Error::format(path, e.to_string()))?;
            Some(o)
        }
        None => None,
    };
    Ok(Checkpoint { params, optimizer })
}

/// Checks that every sample needing a target has one on the model's patch grid.
pub fn check_targets(corpus: &Corpus, config: &TrainConfig) -> Result<()> {
    let grid = config.model.grid();
    for s in corpus.expects_targets() {
        match &s.target {
            None if config.mode.uses_sga() => {
                return Err(Error::invalid("saliency target file missing; run build-saliency first").for_sample(&s.id))
            }
            Some(t) if t.grid() != grid => {
                return Err(Error::shape(format!("target grid {:?} but model grid {grid:?}", t.grid()))
                    .for_sample(&s.id))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Files produced by [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: StepMetrics,
}

/// Trains on `corpus` and writes `model.ckpt` and `metrics.jsonl` into `out_dir`.
///
/// With `resume`, parameters and optimizer state come from that checkpoint,
/// the batch stream is advanced past the steps already taken, and metrics are
/// appended; training stops once the step counter reaches `config.steps`.
pub fn run_training(config: &TrainConfig, corpus: &Corpus, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutput> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    check_targets(corpus, config)?;
    let root = Rng::new(config.seed);
    let (mut params, mut opt) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.params.config != config.model {
                return Err(Error::invalid("checkpoint model config differs from the training config"));
            }
            let opt = ck.optimizer.unwrap_or_else(|| OptimizerState::new(&ck.params));
            (ck.params, opt)
        }
        None => {
            let params = ModelParams::init(config.model, &mut root.fork(0))?;
            let opt = OptimizerState::new(&params);
            (params, opt)
        }
    };
    let mut stream = crate::datagen::BatchStream::new(corpus.len(), config.batch_size, root.fork(1))?;
    stream.skip(opt.step as usize);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let n_visual = config.model.num_patches();
    let mut last = None;
    while (opt.step as usize) < config.steps {
        let idx = stream.next_batch();
        let items = idx
            .iter()
            .map(|&i| BatchItem::from_sample(&corpus.samples[i], n_visual))
            .collect::<Result<Vec<_>>>()?;
        let m = train_step(&mut params, &mut opt, &items, config)?;
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&metrics_path, e))?;
        last = Some(m);
    }
    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &params, Some(&opt))?;
    let last = last.ok_or_else(|| Error::invalid("checkpoint already reached the requested step count"))?;
    Ok(TrainOutput { checkpoint, metrics: metrics_path, last })
}

/// Result of [`verify_gradients`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub mode: Mode,
    pub fusion: FusionMode,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub num_parameters: usize,
}

/// Denominator floor of the relative error, so parameters with vanishing
/// gradients are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the analytic gradient of the total loss with central differences on
/// every parameter of a tiny model and a two-sample batch (one image+text query
/// with a saliency target, one text-only query).
pub fn verify_gradients(mode: Mode, fusion: FusionMode, seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig::tiny();
    let mut rng = Rng::new(seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    // move away from the near-uniform initialization so every path carries signal
    params.for_each_mut(|_, data| data.iter_mut().for_each(|v| *v += 0.3 * rng.normal()));

    let n = config.num_patches();
    let mut image = || -> Result<Array2<f64>> {
        let px = (0..config.image_height * config.image_width * config.channels).map(|_| rng.uniform()).collect();
        patchify(&ImageTensor::new(config.image_height, config.image_width, config.channels, px)?, config.patch_size)
    };
    let (q0, c0, c1) = (image()?, image()?, image()?);
    let target = Distribution::from_weights((0..n).map(|i| 0.2 + i as f64).collect())?;
    let batch = vec![
        BatchItem {
            id: "check-0",
            query_seq: TokenSequence::build(n, &[0], &[2])?,
            query_patches: Some(&q0),
            candidate_seq: TokenSequence::build(n, &[], &[4])?,
            candidate_patches: &c0,
            target: Some(&target),
        },
        BatchItem {
            id: "check-1",
            query_seq: TokenSequence::build(0, &[1], &[3])?,
            query_patches: None,
            candidate_seq: TokenSequence::build(n, &[], &[4])?,
            candidate_patches: &c1,
            target: None,
        },
    ];
    let loss = LossConfig { layers: AlignmentLayers::Late, ..LossConfig::default() };
    let sdr = SdrConfig { fusion, top_k: TopK::All, ..SdrConfig::default() };

    let (_, grads) = loss_and_grad(&params, &batch, mode, &loss, &sdr)?;
    let analytic = grads.to_flat();
    let theta = params.to_flat();
    let mut probe = params.clone();
    let numeric = finite_diff_gradient(
        |th| {
            probe.set_flat(th).expect("same layout");
            loss_and_grad(&probe, &batch, mode, &loss, &sdr).map(|(m, _)| m.l_total).unwrap_or(f64::NAN)
        },
        &theta,
        GRAD_CHECK_STEP,
    )?;

    let mut names = Vec::with_capacity(theta.len());
    params.for_each(|name, _, data| names.extend((0..data.len()).map(|i| format!("{name}[{i}]"))));
    let mut worst = (0.0f64, String::new());
    for ((a, nu), name) in analytic.iter().zip(&numeric).zip(names) {
        let rel = (a - nu).abs() / a.abs().max(nu.abs()).max(GRAD_CHECK_FLOOR);
        if !(rel <= worst.0) {
            worst = (rel, name);
        }
    }
    Ok(GradCheckReport {
        mode,
        fusion,
        max_rel_error: worst.0,
        worst_parameter: worst.1,
        num_parameters: theta.len(),
    })
}

/// Fixed order of the check configurations: the four modes with additive fusion,
/// then full mode with the two remaining fusion rules.
pub fn grad_check_suite() -> Vec<(Mode, FusionMode)> {
    let mut out: Vec<(Mode, FusionMode)> = Mode::ALL.iter().map(|&m| (m, FusionMode::Add)).collect();
    out.push((Mode::Full, FusionMode::ConcatProject));
    out.push((Mode::SdrOnly, FusionMode::ConcatProject));
    out
}
