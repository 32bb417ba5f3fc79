use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ssame::config::{parse_pairs, RunConfig};
use ssame::datagen::{build_corpus_targets, generate_corpus, Corpus, Split};
use ssame::eval::{
    attention_map, embed_candidates, embed_queries, evaluate, export_heatmap, load_candidates, saliency_stats,
    side_by_side, stack, EvalConfig,
};
use ssame::io;
use ssame::numerics::Grid2D;
use ssame::sdr::FusionMode;
use ssame::train::{grad_check_suite, load_checkpoint, run_training, verify_gradients, Mode};

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Name of the resolved config written next to a checkpoint.
const RUN_CONFIG: &str = "run.cfg";

const PRECEDENCE: &str = "\
Configuration precedence, lowest first:
  built-in defaults
  run.cfg next to --ckpt (eval, embed, visualize)
  --config FILE
  --set KEY=VALUE, in order
  dedicated flags such as --seed or --mode

Exit codes: 0 success, 1 invalid input, 2 runtime failure.";

#[derive(Parser)]
#[command(name = "ssame", version, about = "Saliency-guided multimodal embedding toolkit", after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic retrieval corpus
    GenData(GenData),
    /// Rebuild saliency targets for a corpus
    BuildSaliency(BuildSaliency),
    /// Train an embedding model
    Train(Train),
    /// Evaluate a checkpoint on the eval split
    Eval(Eval),
    /// Write query and candidate embeddings
    Embed(Embed),
    /// Write model attention next to the saliency target for eval samples
    Visualize(Visualize),
    /// Mean saliency heatmap and its hot spots
    Stats(Stats),
    /// Compare analytic gradients with finite differences on a tiny model
    GradCheck(GradCheck),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples
    #[arg(long)]
    train: Option<usize>,
    /// Evaluation samples
    #[arg(long)]
    eval: Option<usize>,
    /// Candidates per eval query
    #[arg(long)]
    pool: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct BuildSaliency {
    /// Corpus directory
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving targets/<id>.tnsr
    #[arg(long)]
    out: PathBuf,
    /// Gaussian blur width in pixels
    #[arg(long)]
    sigma: Option<f64>,
    /// Confidence threshold for keeping a subject mask
    #[arg(long)]
    delta: Option<f64>,
    /// Keep every subject mask regardless of its score
    #[arg(long)]
    no_filter: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving model.ckpt, metrics.jsonl and run.cfg
    #[arg(long)]
    out: PathBuf,
    /// Root of saliency targets (default: the corpus directory)
    #[arg(long)]
    targets: Option<PathBuf>,
    /// baseline | sga | sdr | full
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Root of saliency targets (default: the corpus directory)
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Embedding mode; defaults to the one the checkpoint was trained with
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory receiving report.json
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Embed {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// train | eval
    #[arg(long, default_value = "eval")]
    split: String,
}

#[derive(Args)]
struct Visualize {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sample ids (default: the first image queries)
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    /// Number of samples when --ids is absent
    #[arg(long, default_value_t = 8)]
    limit: usize,
    /// Pixels per patch in the output (default: the patch size)
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Args)]
struct Stats {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Pixels per patch in the output heatmaps (default: the patch size)
    #[arg(long)]
    scale: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Check one mode only
    #[arg(long)]
    mode: Option<String>,
    /// Check one fusion only (with --mode)
    #[arg(long)]
    fusion: Option<String>,
}

/// Bad invocation detected by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some() || e.downcast_ref::<ssame::Error>().is_some_and(ssame::Error::is_validation)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::BuildSaliency(a) => build_saliency(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Embed(a) => embed(a),
        Command::Visualize(a) => visualize(a),
        Command::Stats(a) => stats(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Layers config sources in precedence order and logs the result.
fn resolve(base: RunConfig, args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_all(&parse_pairs(&text)?)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.apply(k, v)?;
        }
    }
    eprintln!("# resolved config\n{}", cfg.render());
    Ok(cfg)
}

fn flag<T: ToString>(key: &'static str, v: &Option<T>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(ToString::to_string))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} directory not found: {}", path.display())))
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = resolve(
        RunConfig::default(),
        &a.cfg,
        &[
            flag("data.seed", &a.seed),
            flag("data.n_train", &a.train),
            flag("data.n_eval", &a.eval),
            flag("data.pool_size", &a.pool),
        ],
    )?;
    generate_corpus(&cfg.data, &cfg.train.pipeline, &a.out)?;
    eprintln!("wrote corpus to {}", a.out.display());
    Ok(())
}

fn build_saliency(a: BuildSaliency) -> Result<()> {
    require_dir(&a.data, "corpus")?;
    let cfg = resolve(
        RunConfig::default(),
        &a.cfg,
        &[
            flag("saliency.sigma", &a.sigma),
            flag("saliency.delta", &a.delta),
            ("saliency.filtering", a.no_filter.then(|| "false".to_string())),
        ],
    )?;
    let summary = build_corpus_targets(&a.data, cfg.data.classes, &cfg.train.pipeline, &a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn train(a: Train) -> Result<()> {
    require_dir(&a.data, "corpus")?;
    let cfg = resolve(
        RunConfig::default(),
        &a.cfg,
        &[
            flag("train.mode", &a.mode),
            flag("train.steps", &a.steps),
            flag("train.seed", &a.seed),
            flag("train.learning_rate", &a.lr),
            flag("train.batch_size", &a.batch_size),
        ],
    )?;
    cfg.train.validate()?;
    if let Some(r) = &a.resume {
        if !r.is_file() {
            return Err(usage(format!("checkpoint not found: {}", r.display())));
        }
    }
    let corpus = Corpus::load(&a.data, Split::Train, a.targets.as_deref(), &cfg.train.model)?;
    io::write_file(&a.out.join(RUN_CONFIG), cfg.render().as_bytes())?;
    let out = run_training(&cfg.train, &corpus, &a.out, a.resume.as_deref())?;
    println!("{}", serde_json::to_string(&out.last)?);
    eprintln!("wrote {}", out.checkpoint.display());
    Ok(())
}

/// Loads the checkpoint first so a bad path is reported before anything else.
fn load_model(a: &ModelArgs, extra: &[(&str, Option<String>)]) -> Result<(ssame::model::ModelParams, RunConfig)> {
    let ck = load_checkpoint(&a.ckpt)?;
    let beside = a.ckpt.parent().map(|p| p.join(RUN_CONFIG));
    let base = match beside.filter(|p| p.is_file()) {
        Some(p) => RunConfig::from_file(&p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut flags = vec![flag("train.mode", &a.mode)];
    flags.extend(extra.iter().cloned());
    let mut cfg = resolve(base, &a.cfg, &flags)?;
    cfg.train.model = ck.params.config;
    cfg.train.sdr.validate()?;
    require_dir(&a.data, "corpus")?;
    Ok((ck.params, cfg))
}

fn eval_config(cfg: &RunConfig, seed: u64) -> EvalConfig {
    EvalConfig { mode: cfg.train.mode, sdr: cfg.train.sdr, seed, ..EvalConfig::default() }
}

fn eval(a: Eval) -> Result<()> {
    let (params, cfg) = load_model(&a.model, &[flag("train.seed", &a.seed)])?;
    let corpus = Corpus::load(&a.model.data, Split::Eval, a.model.targets.as_deref(), &params.config)?;
    let candidates = load_candidates(&a.model.data, &params.config)?;
    let report = evaluate(&params, &corpus, &candidates, &eval_config(&cfg, cfg.train.seed))?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        io::write_file(&out.join("report.json"), format!("{json}\n").as_bytes())?;
    }
    println!("{json}");
    Ok(())
}

fn embed(a: Embed) -> Result<()> {
    let split: Split = a.split.parse()?;
    let (params, cfg) = load_model(&a.model, &[])?;
    let ecfg = eval_config(&cfg, cfg.train.seed);
    let corpus = Corpus::load(&a.model.data, split, a.model.targets.as_deref(), &params.config)?;
    let queries: Vec<Vec<f64>> = embed_queries(&params, &corpus, &ecfg)?.into_iter().map(|q| q.embedding).collect();
    let candidates = embed_candidates(&params, &load_candidates(&a.model.data, &params.config)?, &ecfg)?;
    let (cand_ids, cand_embs): (Vec<String>, Vec<Vec<f64>>) = candidates.into_iter().unzip();
    for (name, embs) in [("queries", &queries), ("candidates", &cand_embs)] {
        let m = stack(embs)?;
        io::write_tensor(&a.out.join(format!("{name}.tnsr")), &[m.nrows(), m.ncols()], m.as_slice().unwrap_or(&[]))?;
    }
    let ids = serde_json::json!({
        "queries": corpus.samples.iter().map(|s| &s.id).collect::<Vec<_>>(),
        "candidates": cand_ids,
    });
    io::write_file(&a.out.join("ids.json"), format!("{}\n", serde_json::to_string_pretty(&ids)?).as_bytes())?;
    eprintln!("wrote {} query and {} candidate embeddings", queries.len(), cand_ids.len());
    Ok(())
}

fn visualize(a: Visualize) -> Result<()> {
    let (params, cfg) = load_model(&a.model, &[])?;
    let mut corpus = Corpus::load(&a.model.data, Split::Eval, a.model.targets.as_deref(), &params.config)?;
    if a.ids.is_empty() {
        corpus.samples.retain(|s| s.query_image.is_some());
        corpus.samples.truncate(a.limit);
    } else {
        let mut picked = Vec::with_capacity(a.ids.len());
        for id in &a.ids {
            let s = corpus
                .samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| usage(format!("no eval sample with id '{id}'")))?;
            if s.query_image.is_none() {
                return Err(usage(format!("sample '{id}' has no query image")));
            }
            picked.push(s.clone());
        }
        corpus.samples = picked;
    }
    let scale = a.scale.unwrap_or(params.config.patch_size);
    let outputs = embed_queries(&params, &corpus, &eval_config(&cfg, cfg.train.seed))?;
    for (s, q) in corpus.samples.iter().zip(&outputs) {
        let model_map = export_heatmap(&attention_map(&q.attention, &params.config)?, scale)?;
        let (gh, gw) = params.config.grid();
        let target = s.target.as_ref().map_or_else(|| Grid2D::zeros(gh, gw), |t| t.as_grid());
        let target_map = export_heatmap(&target, scale)?;
        io::write_gray(&a.out.join(format!("{}.pgm", s.id)), &side_by_side(&model_map, &target_map)?)?;
    }
    eprintln!("wrote {} heatmaps to {}", outputs.len(), a.out.display());
    Ok(())
}

fn stats(a: Stats) -> Result<()> {
    require_dir(&a.data, "corpus")?;
    let cfg = resolve(RunConfig::default(), &a.cfg, &[])?;
    let model = cfg.train.model;
    let mut targets = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let corpus = Corpus::load(&a.data, split, a.targets.as_deref(), &model)?;
        targets.extend(corpus.samples.into_iter().filter_map(|s| s.target));
    }
    let st = saliency_stats(&targets)?;
    let scale = a.scale.unwrap_or(model.patch_size);
    io::write_gray(&a.out.join("mean.pgm"), &export_heatmap(&st.mean, scale)?)?;
    io::write_gray(&a.out.join("hotspots.pgm"), &export_heatmap(&st.hotspots, scale)?)?;
    let summary = serde_json::json!({
        "targets": st.count,
        "threshold": st.threshold,
        "hotspot_cells": st.hotspots.values().iter().filter(|&&v| v > 0.0).count(),
        "grid": [st.mean.height(), st.mean.width()],
        "mean": st.mean.values(),
    });
    let json = serde_json::to_string_pretty(&summary)?;
    io::write_file(&a.out.join("stats.json"), format!("{json}\n").as_bytes())?;
    println!("{}", serde_json::to_string(&summary["hotspot_cells"])?);
    Ok(())
}

#[derive(Debug)]
struct GradCheckFailed(f64);

impl fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "max relative error {:.3e} exceeds {GRAD_CHECK_TOLERANCE:e}", self.0)
    }
}

impl std::error::Error for GradCheckFailed {}

fn grad_check(a: GradCheck) -> Result<()> {
    let configs = match (&a.mode, &a.fusion) {
        (None, None) => grad_check_suite(),
        (Some(m), f) => {
            let fusion: FusionMode = f.as_deref().unwrap_or("add").parse()?;
            vec![(m.parse::<Mode>()?, fusion)]
        }
        (None, Some(_)) => return Err(usage("--fusion needs --mode")),
    };
    let mut worst: f64 = 0.0;
    for (mode, fusion) in configs {
        let r = verify_gradients(mode, fusion, a.seed)?;
        println!(
            "mode={} fusion={} params={} max_rel_error={:.3e} worst={}",
            r.mode, r.fusion, r.num_parameters, r.max_rel_error, r.worst_parameter
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst <= GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(GradCheckFailed(worst).into())
    }
}
