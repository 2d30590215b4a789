//! `lorae` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or input errors, 3 numerical failure or a
//! failed theory check.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

mod source;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use lorae::data::{Dataset, Split};
use lorae::experiments::{self, ConvergenceProblem, DeskConfig, RunDir, SamplerKind};
use lorae::generative::{self, ProxyFid};
use lorae::latent;
use lorae::model::{LoraeParams, ModelConfig};
use lorae::optim::{self, TrainConfig};
use lorae::probe::{self, ProbeConfig};
use lorae::LoraeError;

use source::DataSource;

#[derive(Parser)]
#[command(
    name = "lorae",
    version,
    about = "Low-rank autoencoder: training, analysis, generation, probing and theory checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Latent covariance spectrum and numerical rank.
    Analyze(AnalyzeArgs),
    /// Fit a latent sampler and write a PGM grid of decoded samples.
    Generate(GenerateArgs),
    /// Decode the straight latent path between two images.
    Interpolate(InterpolateArgs),
    /// Train classification heads on the frozen encoder.
    Probe(ProbeArgs),
    /// Empirical checks of the theoretical claims.
    Theory(TheoryArgs),
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn check_failed(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<LoraeError> for CliError {
    fn from(e: LoraeError) -> Self {
        CliError {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn need<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::usage(format!("missing required flag {flag}")))
}

/// Fill flags that were not given on the command line from a JSON object.
/// Keys are flag names with `-` or `_`.
fn merge_config<T: Serialize + DeserializeOwned>(args: T, config: Option<&Path>) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(args);
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))?;
    let file: Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))?;
    let Value::Object(file) = file else {
        return Err(CliError::usage("--config must hold a JSON object"));
    };
    let mut current = serde_json::to_value(&args).map_err(|e| CliError::usage(e.to_string()))?;
    let slots = current.as_object_mut().expect("argument structs serialize to objects");
    for (key, value) in file {
        let name = key.replace('-', "_");
        match slots.get(&name) {
            None => return Err(CliError::usage(format!("--config: unknown key '{key}'"))),
            Some(Value::Null) => {
                slots.insert(name, value);
            }
            Some(_) => {}
        }
    }
    serde_json::from_value(current).map_err(|e| CliError::usage(format!("--config: {e}")))
}

fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| CliError::usage(format!("{flag}: '{s}': {e}"))))
        .collect()
}

fn data_source(spec: Option<String>) -> CliResult<DataSource> {
    DataSource::parse(&need(spec, "--data")?).map_err(CliError::usage)
}

fn load_checkpoint(path: Option<PathBuf>) -> CliResult<(ModelConfig, LoraeParams)> {
    let path = need(path, "--checkpoint")?;
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "--checkpoint: '{}' is not a file",
            path.display()
        )));
    }
    Ok(LoraeParams::load(&path)?)
}

fn parse_split(s: Option<&str>, default: Split) -> CliResult<Split> {
    match s {
        None => Ok(default),
        Some("train") => Ok(Split::Train),
        Some("test") => Ok(Split::Test),
        Some(other) => Err(CliError::usage(format!(
            "--split: expected train or test, got '{other}'"
        ))),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
struct TrainArgs {
    /// MNIST IDX directory or `synth:n=..,d=..,r=..,noise=..,seed=..`
    #[arg(long)]
    data: Option<String>,
    /// Latent dimension l [default: 32]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Encoder hidden widths, comma separated; empty for a linear encoder [default: 256,64]
    #[arg(long)]
    hidden: Option<String>,
    /// Nuclear-norm penalty λ; 0 trains the plain autoencoder [default: 1e-3]
    #[arg(long)]
    lambda: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// ADAM step size α [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Full-batch steps, one per epoch
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Use bias-corrected ADAM moments
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    bias_correction: Option<bool>,
    /// Number of training images kept [default: 8000]
    #[arg(long)]
    train_size: Option<usize>,
    /// Use full-scale defaults (60000 images, l = 128, 50 epochs)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    paper_scale: Option<bool>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file supplying any of these flags (command line wins)
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn desk_base(paper_scale: Option<bool>) -> DeskConfig {
    if paper_scale.unwrap_or(false) {
        DeskConfig::paper_scale()
    } else {
        DeskConfig::default()
    }
}

fn run_train(args: TrainArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = merge_config(args, config.as_deref())?;
    let source = data_source(a.data.clone())?;
    let out = need(a.out.clone(), "--out")?;
    let base = desk_base(a.paper_scale);
    let hidden = match &a.hidden {
        Some(h) => parse_list(h, "--hidden")?,
        None => base.hidden.clone(),
    };
    let train_size = a.train_size.unwrap_or(base.train_size);
    let ds = source.load(Split::Train, train_size)?;
    let lambda = a.lambda.unwrap_or(base.lambda);
    let mcfg = ModelConfig {
        input_dim: ds.dim(),
        latent_dim: a.latent_dim.unwrap_or(base.latent_dim),
        hidden,
        lambda,
        seed: a.seed.unwrap_or(base.seed),
    };
    let tcfg = TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        batch_size: a.batch.unwrap_or(base.batch_size),
        alpha: a.lr.unwrap_or(base.alpha),
        lambda,
        seed: mcfg.seed,
        deterministic: a.deterministic.unwrap_or(false),
        bias_correction: a.bias_correction.unwrap_or(false),
        ..TrainConfig::default()
    };
    let (model, log) = optim::train(LoraeParams::init(&mcfg)?, &ds, &tcfg)?;
    let mut dir = RunDir::create(&out)?;
    experiments::write_training_outputs(&mut dir, &mcfg, &tcfg, &model, &log)?;
    dir.finish("train", mcfg.seed, &a)?;
    if let Some(last) = log.last() {
        println!(
            "steps={} loss={:.6e} recon={:.6e} nuclear_norm_m={:.6e}",
            log.steps.len(),
            last.loss,
            last.recon,
            last.nuclear_norm_m
        );
    }
    println!("checkpoint={}", out.join("checkpoint").display());
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// MNIST IDX directory or `synth:...` spec
    #[arg(long)]
    data: Option<String>,
    /// Rank threshold on max-normalized singular values [default: 1e-3]
    #[arg(long)]
    tau: Option<f64>,
    /// train or test [default: train]
    #[arg(long)]
    split: Option<String>,
    /// [default: 8000]
    #[arg(long)]
    train_size: Option<usize>,
    /// Spectrum CSV path [default: spectrum.csv next to the checkpoint]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn run_analyze(args: AnalyzeArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = merge_config(args, config.as_deref())?;
    let ckpt = need(a.checkpoint.clone(), "--checkpoint")?;
    let (_, model) = load_checkpoint(Some(ckpt.clone()))?;
    let source = data_source(a.data.clone())?;
    let split = parse_split(a.split.as_deref(), Split::Train)?;
    let ds = source.load(split, a.train_size.unwrap_or(DeskConfig::default().train_size))?;
    let spectrum = latent::latent_spectrum(&model.collapse_m(), &ds, a.tau.unwrap_or(latent::DEFAULT_TAU))?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("spectrum.csv"));
    write_file(&out, spectrum.to_csv().as_bytes())?;
    println!("rank={}", spectrum.rank);
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Data whose train split the sampler is fitted on
    #[arg(long)]
    data: Option<String>,
    /// mvg or gmm [default: gmm]
    #[arg(long)]
    sampler: Option<String>,
    /// GMM components [default: 4]
    #[arg(long)]
    k: Option<usize>,
    /// Number of samples in the grid [default: 64]
    #[arg(long)]
    count: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 8000]
    #[arg(long)]
    train_size: Option<usize>,
    /// Also report proxy-FID against the test split
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fid: Option<bool>,
    /// Samples used for proxy-FID [default: 10000]
    #[arg(long)]
    fid_samples: Option<usize>,
    /// Output PGM file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn run_generate(args: GenerateArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = merge_config(args, config.as_deref())?;
    let kind: SamplerKind = a
        .sampler
        .as_deref()
        .unwrap_or("gmm")
        .parse()
        .map_err(|e: LoraeError| CliError::usage(e.to_string()))?;
    let (_, model) = load_checkpoint(a.checkpoint.clone())?;
    let source = data_source(a.data.clone())?;
    let out = need(a.out.clone(), "--out")?;
    let base = DeskConfig::default();
    let count = a.count.unwrap_or(64);
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let k = a.k.unwrap_or(base.gmm_k);
    let seed = a.seed.unwrap_or(0);
    let train = source.load(Split::Train, a.train_size.unwrap_or(base.train_size))?;
    let latents = model.collapse_m().apply(&train.images)?;
    let z = experiments::sample_latents(&latents, kind, k, count, seed)?;
    let images = model.decoder.apply(&z)?;
    let cols = (count as f64).sqrt().ceil() as usize;
    write_file(&out, &generative::pgm_grid(&images, train.height, train.width, cols)?)?;
    println!("wrote {count} samples to {}", out.display());
    if a.fid.unwrap_or(false) {
        let test = source.load(Split::Test, 0)?;
        let fid = ProxyFid::new(&test.images, base.feature_dim)?;
        let res = experiments::generation_eval(
            &model,
            &train,
            &fid,
            kind,
            k,
            a.fid_samples.unwrap_or(base.fid_samples),
            seed,
        )?;
        println!("proxy_fid={:.6e}", res.proxy_fid);
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    /// Index of the first image
    #[arg(long)]
    idx1: Option<usize>,
    /// Index of the second image
    #[arg(long)]
    idx2: Option<usize>,
    /// Frames including both endpoints [default: 10]
    #[arg(long)]
    steps: Option<usize>,
    /// train or test [default: test]
    #[arg(long)]
    split: Option<String>,
    /// Output PGM file (one row of frames)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn pick(ds: &Dataset, idx: usize, flag: &str) -> CliResult<Vec<f64>> {
    if idx >= ds.len() {
        return Err(CliError::usage(format!(
            "{flag} {idx} out of range (dataset has {} images)",
            ds.len()
        )));
    }
    Ok(ds.images.row(idx).to_vec())
}

fn run_interpolate(args: InterpolateArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = merge_config(args, config.as_deref())?;
    let (_, model) = load_checkpoint(a.checkpoint.clone())?;
    let source = data_source(a.data.clone())?;
    let out = need(a.out.clone(), "--out")?;
    let split = parse_split(a.split.as_deref(), Split::Test)?;
    let ds = source.load(split, DeskConfig::default().train_size)?;
    let x1 = pick(&ds, need(a.idx1, "--idx1")?, "--idx1")?;
    let x2 = pick(&ds, need(a.idx2, "--idx2")?, "--idx2")?;
    let steps = a.steps.unwrap_or(10);
    let path = generative::interpolate(&model.collapse_m(), &model.decoder, &x1, &x2, steps)?;
    write_file(&out, &generative::pgm_grid(&path.images, ds.height, ds.width, steps)?)?;
    println!("wrote {steps} frames to {}", out.display());
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled MNIST IDX directory
    #[arg(long)]
    data: Option<String>,
    /// Labeled subset sizes, comma separated [default: 100]
    #[arg(long)]
    sizes: Option<String>,
    /// Seeds, comma separated [default: 0,1,2]
    #[arg(long)]
    seeds: Option<String>,
    /// Hidden width of the head [default: 64]
    #[arg(long)]
    hidden: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Pool the subsets are drawn from [default: 8000]
    #[arg(long)]
    train_size: Option<usize>,
    /// Tag written in the model_tag column [default: checkpoint file stem]
    #[arg(long)]
    tag: Option<String>,
    /// Results CSV path [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn run_probe(args: ProbeArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = merge_config(args, config.as_deref())?;
    let ckpt = need(a.checkpoint.clone(), "--checkpoint")?;
    let (mcfg, model) = load_checkpoint(Some(ckpt.clone()))?;
    let source = data_source(a.data.clone())?;
    let sizes: Vec<usize> = parse_list(a.sizes.as_deref().unwrap_or("100"), "--sizes")?;
    let seeds: Vec<u64> = parse_list(a.seeds.as_deref().unwrap_or("0,1,2"), "--seeds")?;
    let defaults = ProbeConfig::default();
    let pcfg = ProbeConfig {
        hidden: a.hidden.unwrap_or(defaults.hidden),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        alpha: a.lr.unwrap_or(defaults.alpha),
        seed: 0,
    };
    let pool = source.load(Split::Train, a.train_size.unwrap_or(DeskConfig::default().train_size))?;
    let test = source.load(Split::Test, 0)?;
    let tag = a.tag.clone().unwrap_or_else(|| {
        ckpt.parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let records = experiments::probe_sweep(&[(&tag, mcfg.lambda, &model)], &pool, &test, &sizes, &seeds, &pcfg)?;
    let mut csv = Vec::new();
    probe::write_probe_csv(&records, &mut csv)?;
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    for &s in &sizes {
        let accs: Vec<f64> = records
            .iter()
            .filter(|r| r.subset_size == s)
            .map(|r| r.accuracy)
            .collect();
        println!(
            "size={s} mean_accuracy={:.4}",
            accs.iter().sum::<f64>() / accs.len() as f64
        );
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
struct TheoryArgs {
    /// convergence, rank-lambda or minmax
    #[arg(long)]
    check: Option<String>,
    /// Data for rank-lambda and minmax
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint for minmax (must have λ > 0)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// rank-lambda: penalties to sweep [default: 0,1e-5,1e-3,1e-1]
    #[arg(long)]
    lambdas: Option<String>,
    /// rank-lambda: latent dimension [default: 32]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// rank-lambda: hidden widths [default: 256,64]
    #[arg(long)]
    hidden: Option<String>,
    /// rank-lambda: [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// rank-lambda: [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// rank-lambda: [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// rank-lambda: [default: 8000]
    #[arg(long)]
    train_size: Option<usize>,
    /// rank-lambda: samples per proxy-FID estimate [default: 10000]
    #[arg(long)]
    fid_samples: Option<usize>,
    /// rank-lambda: PCA features for proxy-FID [default: 64]
    #[arg(long)]
    feature_dim: Option<usize>,
    /// rank-lambda: full-scale defaults
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    paper_scale: Option<bool>,
    /// convergence: horizons T [default: 100,400,1600]
    #[arg(long)]
    horizons: Option<String>,
    /// minmax: query points [default: 50]
    #[arg(long)]
    queries: Option<usize>,
    /// minmax: reference points [default: 1000]
    #[arg(long)]
    refs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output: CSV file (convergence, minmax) or run directory (rank-lambda)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn run_theory(args: TheoryArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = merge_config(args, config.as_deref())?;
    match need(a.check.clone(), "--check")?.as_str() {
        "convergence" => theory_convergence(&a),
        "rank-lambda" => theory_rank_lambda(&a),
        "minmax" => theory_minmax(&a),
        other => Err(CliError::usage(format!(
            "--check: unknown check '{other}' (expected convergence, rank-lambda or minmax)"
        ))),
    }
}

fn theory_convergence(a: &TheoryArgs) -> CliResult<()> {
    let horizons: Vec<usize> = parse_list(a.horizons.as_deref().unwrap_or("100,400,1600"), "--horizons")?;
    let problem = ConvergenceProblem {
        seed: a.seed.unwrap_or(0),
        ..ConvergenceProblem::default()
    };
    let report = experiments::convergence_check(&problem, &horizons)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = &a.out {
        write_file(p, csv.as_bytes())?;
    }
    let slope = if report.rows.len() >= 2 {
        report.log_log_slope()
    } else {
        0.0
    };
    println!(
        "L0={:.6e} gamma={:.6e} K={:.6e} non_increasing={} slope={:.4}",
        report.initial_loss,
        report.gamma,
        report.lipschitz,
        report.non_increasing(),
        slope
    );
    if !report.non_increasing() || slope > 0.0 {
        return Err(CliError::check_failed(
            "minimum gradient norm does not decrease with the horizon",
        ));
    }
    Ok(())
}

fn theory_rank_lambda(a: &TheoryArgs) -> CliResult<()> {
    let source = data_source(a.data.clone())?;
    let lambdas: Vec<f64> = parse_list(a.lambdas.as_deref().unwrap_or("0,1e-5,1e-3,1e-1"), "--lambdas")?;
    let mut base = desk_base(a.paper_scale);
    if let Some(h) = &a.hidden {
        base.hidden = parse_list(h, "--hidden")?;
    }
    base.latent_dim = a.latent_dim.unwrap_or(base.latent_dim);
    base.epochs = a.epochs.unwrap_or(base.epochs);
    base.batch_size = a.batch.unwrap_or(base.batch_size);
    base.alpha = a.lr.unwrap_or(base.alpha);
    base.train_size = a.train_size.unwrap_or(base.train_size);
    base.fid_samples = a.fid_samples.unwrap_or(base.fid_samples);
    base.feature_dim = a.feature_dim.unwrap_or(base.feature_dim);
    base.seed = a.seed.unwrap_or(base.seed);
    let train = source.load(Split::Train, base.train_size)?;
    let test = source.load(Split::Test, 0)?;
    let sweep = experiments::lambda_sweep(&train, &test, &lambdas, &base, a.out.as_deref())?;
    let csv = sweep.to_csv();
    print!("{csv}");
    if let Some(dir) = &a.out {
        write_file(&dir.join("sweep.csv"), csv.as_bytes())?;
    }
    let ordered = experiments::ranks_ordered(&sweep.rows);
    println!("ordered={ordered}");
    if !ordered {
        return Err(CliError::check_failed("latent rank is not non-increasing in λ"));
    }
    Ok(())
}

fn theory_minmax(a: &TheoryArgs) -> CliResult<()> {
    let (cfg, model) = load_checkpoint(a.checkpoint.clone())?;
    if !(cfg.lambda > 0.0) {
        return Err(CliError::usage("minmax check needs a checkpoint trained with λ > 0"));
    }
    let source = data_source(a.data.clone())?;
    let pool = source.load(Split::Test, 0)?;
    let queries = a.queries.unwrap_or(50);
    let refs = a.refs.unwrap_or(1000).min(pool.len().saturating_sub(queries));
    let ratios = experiments::minmax_check(&model, &pool, queries, refs, a.seed.unwrap_or(0))?;
    let mut csv = String::from("query,ratio\n");
    for (i, r) in ratios.iter().enumerate() {
        csv.push_str(&format!("{i},{r:e}\n"));
    }
    if let Some(p) = &a.out {
        write_file(p, csv.as_bytes())?;
    }
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    println!("queries={} refs={refs} min_ratio={min:.6e}", ratios.len());
    if !(min > 0.0) {
        return Err(CliError::check_failed("a min-max ratio is not positive"));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Generate(a) => run_generate(a),
        Command::Interpolate(a) => run_interpolate(a),
        Command::Probe(a) => run_probe(a),
        Command::Theory(a) => run_theory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_fills_only_missing_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"lambda": 0.5, "latent-dim": 7, "data": "synth:n=20"}"#).unwrap();
        let args = TrainArgs {
            lambda: Some(0.1),
            ..TrainArgs::default()
        };
        let merged = merge_config(args, Some(&path)).unwrap();
        assert_eq!(merged.lambda, Some(0.1));
        assert_eq!(merged.latent_dim, Some(7));
        assert_eq!(merged.data.as_deref(), Some("synth:n=20"));
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"lamda": 0.5}"#).unwrap();
        let err = merge_config(TrainArgs::default(), Some(&path)).err().unwrap();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("lamda"));
    }

    #[test]
    fn empty_hidden_list_is_linear() {
        let v: Vec<usize> = parse_list("", "--hidden").unwrap();
        assert!(v.is_empty());
        assert_eq!(parse_list::<usize>("256, 64", "--hidden").unwrap(), vec![256, 64]);
        assert!(parse_list::<usize>("a", "--hidden").is_err());
    }
}
