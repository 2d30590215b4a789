//! End-to-end runs: λ sweep with spectra and proxy-FID, generation eval,
//! probe sweep, and the deterministic-ADAM convergence check.
//!
//! Every number is a function of the config and seed. Runs that persist
//! outputs write them under `runs/<name>/` together with a `manifest.json`
//! holding SHA-256 hashes of every file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, Split};
use crate::error::{LoraeError, Result};
use crate::generative::{self, ProxyFid};
use crate::latent::{self, LatentSpectrum};
use crate::linalg::Matrix;
use crate::model::{LoraeParams, LossOutput, ModelConfig};
use crate::optim::{self, MetricLog, TrainConfig};
use crate::probe::{self, ProbeConfig, ProbeRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub train_size: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub tau: f64,
    pub gmm_k: usize,
    pub fid_samples: usize,
    pub feature_dim: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            train_size: 8000,
            latent_dim: 32,
            hidden: vec![256, 64],
            epochs: 10,
            batch_size: 32,
            alpha: 1e-3,
            lambda: 1e-3,
            seed: 0,
            tau: latent::DEFAULT_TAU,
            gmm_k: 4,
            fid_samples: 10_000,
            feature_dim: generative::DEFAULT_FEATURE_DIM,
        }
    }
}

impl DeskConfig {
    /// Full MNIST train split, `l = 128`, 50 epochs.
    pub fn paper_scale() -> Self {
        DeskConfig {
            train_size: 60_000,
            latent_dim: 128,
            hidden: vec![512, 256],
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn model_config(&self, input_dim: usize, lambda: f64) -> ModelConfig {
        ModelConfig {
            input_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            lambda,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            alpha: self.alpha,
            lambda,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Load both MNIST splits from `dir`, resize to 32×32, and keep the first
/// `train_size` training images.
pub fn load_mnist_32(dir: &Path, train_size: usize) -> Result<(Dataset, Dataset)> {
    let train = data::load_mnist_dir(dir, Split::Train)?;
    let test = data::load_mnist_dir(dir, Split::Test)?;
    if train.len() < train_size {
        log::warn!("requested {train_size} training images, {} available", train.len());
    }
    Ok((
        data::resize_to_32(&train.first(train_size))?,
        data::resize_to_32(&test)?,
    ))
}

/// Writes files into one run directory and records their hashes.
pub struct RunDir {
    path: PathBuf,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub code_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// File name → SHA-256 hex digest.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path)?;
        Ok(RunDir {
            path,
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::write(&p, bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Write `manifest.json` covering everything written so far.
    pub fn finish<C: Serialize>(self, name: &str, seed: u64, config: &C) -> Result<Manifest> {
        let manifest = Manifest {
            name: name.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)?,
            outputs: self.outputs.clone(),
        };
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        fs::write(self.path.join("manifest.json"), s)?;
        Ok(manifest)
    }
}

/// Persist a trained model's standard files into `dir`.
pub fn write_training_outputs(
    dir: &mut RunDir,
    config: &ModelConfig,
    train: &TrainConfig,
    model: &LoraeParams,
    log: &MetricLog,
) -> Result<()> {
    dir.write_json("config.json", &serde_json::json!({ "model": config, "train": train }))?;
    dir.write("metrics.csv", log.to_csv().as_bytes())?;
    dir.write("checkpoint", &model.to_bytes(config)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Mvg,
    Gmm,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Mvg => "mvg",
            SamplerKind::Gmm => "gmm",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = LoraeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvg" => Ok(SamplerKind::Mvg),
            "gmm" => Ok(SamplerKind::Gmm),
            other => Err(LoraeError::contract(format!(
                "unknown sampler '{other}' (expected mvg or gmm)"
            ))),
        }
    }
}

/// Fit a sampler to latents and draw `count` latent vectors.
pub fn sample_latents(latents: &Matrix, kind: SamplerKind, k: usize, count: usize, seed: u64) -> Result<Matrix> {
    Ok(match kind {
        SamplerKind::Mvg => generative::sample_mvg(&generative::fit_mvg(latents)?, count, seed),
        SamplerKind::Gmm => generative::sample_gmm(&generative::fit_gmm(latents, k, seed)?.model, count, seed),
    })
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub proxy_fid: f64,
    /// `count × input_dim` decoded samples.
    pub images: Matrix,
}

impl GenerationResult {
    /// 8×8 PGM grid of the first 64 samples.
    pub fn grid(&self, height: usize, width: usize) -> Result<Vec<u8>> {
        let n = self.images.rows().min(64);
        let idx: Vec<usize> = (0..n).collect();
        generative::pgm_grid(&self.images.select_rows(&idx), height, width, 8)
    }
}

/// Fit a sampler on the train-split latents, decode `count` samples, and
/// score them against the reference set held by `fid`.
pub fn generation_eval(
    model: &LoraeParams,
    train: &Dataset,
    fid: &ProxyFid,
    kind: SamplerKind,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<GenerationResult> {
    let latents = model.collapse_m().apply(&train.images)?;
    let z = sample_latents(&latents, kind, k, count, seed)?;
    let images = model.decoder.apply(&z)?;
    if !images.is_finite() {
        return Err(LoraeError::Numerical("decoded samples are not finite".into()));
    }
    Ok(GenerationResult {
        proxy_fid: fid.score(&images)?,
        images,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub rank: usize,
    /// Normalized singular value at index `l/2`.
    pub mid_normalized: f64,
    pub proxy_fid_gmm: f64,
    pub proxy_fid_mvg: f64,
    pub final_loss: f64,
    pub nuclear_norm_m: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub spectra: Vec<LatentSpectrum>,
    pub models: Vec<LoraeParams>,
}

impl SweepResult {
    pub fn model_for(&self, lambda: f64) -> Option<&LoraeParams> {
        self.rows
            .iter()
            .position(|r| r.lambda == lambda)
            .map(|i| &self.models[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,rank,mid_normalized,proxy_fid_gmm,proxy_fid_mvg,final_loss,nuclear_norm_m\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:e},{},{:e},{:e},{:e},{:e},{:e}\n",
                r.lambda, r.rank, r.mid_normalized, r.proxy_fid_gmm, r.proxy_fid_mvg, r.final_loss, r.nuclear_norm_m
            ));
        }
        s
    }
}

/// Whether ranks are non-decreasing as λ decreases.
pub fn ranks_ordered(rows: &[SweepRow]) -> bool {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
    sorted.windows(2).all(|w| w[0].rank <= w[1].rank)
}

/// Train one model per λ (shared seed) and report rank, spectrum and proxy-FID.
///
/// With `out` set, each λ gets `out/lambda_<λ>/` with the standard run files.
pub fn lambda_sweep(
    train: &Dataset,
    test: &Dataset,
    lambdas: &[f64],
    base: &DeskConfig,
    out: Option<&Path>,
) -> Result<SweepResult> {
    if lambdas.len() < 2 {
        return Err(LoraeError::contract("a λ sweep needs at least two values"));
    }
    let fid = ProxyFid::new(&test.images, base.feature_dim)?;
    let mut result = SweepResult {
        rows: Vec::new(),
        spectra: Vec::new(),
        models: Vec::new(),
    };
    for &lambda in lambdas {
        let mcfg = base.model_config(train.dim(), lambda);
        let tcfg = base.train_config(lambda);
        let (model, log) = optim::train(LoraeParams::init(&mcfg)?, train, &tcfg)?;
        let encoder = model.collapse_m();
        let spectrum = latent::latent_spectrum(&encoder, train, base.tau)?;
        let gmm = generation_eval(
            &model,
            train,
            &fid,
            SamplerKind::Gmm,
            base.gmm_k,
            base.fid_samples,
            base.seed,
        )?;
        let mvg = generation_eval(
            &model,
            train,
            &fid,
            SamplerKind::Mvg,
            base.gmm_k,
            base.fid_samples,
            base.seed,
        )?;
        let final_obj = model.objective(&train.images, lambda)?;
        log::info!(
            "λ={lambda:e}: rank {} proxy-FID gmm {:.3} mvg {:.3}",
            spectrum.rank,
            gmm.proxy_fid,
            mvg.proxy_fid
        );
        if let Some(root) = out {
            let mut dir = RunDir::create(root.join(format!("lambda_{lambda:e}")))?;
            write_training_outputs(&mut dir, &mcfg, &tcfg, &model, &log)?;
            dir.write("spectrum.csv", spectrum.to_csv().as_bytes())?;
            dir.write("samples_gmm.pgm", &gmm.grid(train.height, train.width)?)?;
            dir.write("samples_mvg.pgm", &mvg.grid(train.height, train.width)?)?;
            dir.finish(&format!("lambda_{lambda:e}"), base.seed, base)?;
        }
        let mid = spectrum.normalized.get(base.latent_dim / 2).copied().unwrap_or(0.0);
        result.rows.push(SweepRow {
            lambda,
            rank: spectrum.rank,
            mid_normalized: mid,
            proxy_fid_gmm: gmm.proxy_fid,
            proxy_fid_mvg: mvg.proxy_fid,
            final_loss: final_obj,
            nuclear_norm_m: crate::linalg::nuclear_norm(&model.m)?,
        });
        result.spectra.push(spectrum);
        result.models.push(model);
    }
    Ok(result)
}

/// Train a head per (model, subset size, seed) and report test accuracy.
pub fn probe_sweep(
    models: &[(&str, f64, &LoraeParams)],
    pool: &Dataset,
    test: &Dataset,
    sizes: &[usize],
    seeds: &[u64],
    config: &ProbeConfig,
) -> Result<Vec<ProbeRecord>> {
    let mut out = Vec::new();
    for &(tag, lambda, model) in models {
        let encoder = model.collapse_m();
        for &s in sizes {
            for &seed in seeds {
                let subset = probe::select_subset(pool, s, seed)?;
                let cfg = ProbeConfig { seed, ..config.clone() };
                let run = probe::train_probe(&encoder, &subset, &cfg)?;
                let accuracy = probe::evaluate(&run.head, &encoder, test)?;
                out.push(ProbeRecord {
                    model_tag: tag.to_string(),
                    lambda,
                    subset_size: s,
                    seed,
                    accuracy,
                });
            }
        }
    }
    Ok(out)
}

/// The fixed synthetic problem used to check the step-size schedule of
/// deterministic ADAM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceProblem {
    pub samples: usize,
    pub input_dim: usize,
    pub data_rank: usize,
    pub noise: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub lambda: f64,
    /// ADAM's ε. Large enough that `δ = γ/ε` leaves a usable step size.
    pub epsilon: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for ConvergenceProblem {
    fn default() -> Self {
        ConvergenceProblem {
            samples: 64,
            input_dim: 16,
            data_rank: 3,
            noise: 0.01,
            latent_dim: 8,
            hidden: vec![16],
            lambda: 1e-3,
            epsilon: 1.0,
            warmup_steps: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub horizon: usize,
    pub alpha: f64,
    pub min_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub initial_loss: f64,
    /// Bound on gradient norms (twice the largest seen during warmup).
    pub gamma: f64,
    /// Empirical gradient-Lipschitz estimate.
    pub lipschitz: f64,
    pub delta: f64,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    pub fn non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].min_grad_norm <= w[0].min_grad_norm)
    }

    /// Least-squares slope of `log(min grad norm)` against `log T`.
    pub fn log_log_slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .map(|r| ((r.horizon as f64).ln(), r.min_grad_norm.ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,alpha,min_grad_norm\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{:e}\n", r.horizon, r.alpha, r.min_grad_norm));
        }
        s
    }
}

fn flat_grad(out: &LossOutput) -> Vec<f64> {
    out.grads.iter().flatten().copied().collect()
}

/// Estimate `γ` and `K`, then run deterministic ADAM with the prescribed
/// step size for each horizon from the same initialization.
///
/// `γ` is twice the largest gradient norm seen over a warmup run at the
/// shortest horizon's step size. `K` is the largest ratio
/// `‖∇L(w) − ∇L(w')‖ / ‖w − w'‖` over consecutive warmup iterates and small
/// random perturbations of the initialization.
pub fn convergence_check(problem: &ConvergenceProblem, horizons: &[usize]) -> Result<ConvergenceReport> {
    if horizons.is_empty() || horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LoraeError::contract(
            "horizons must be non-empty and strictly ascending",
        ));
    }
    let data = data::synth_lowrank(
        problem.samples,
        problem.input_dim,
        problem.data_rank,
        problem.noise,
        problem.seed,
    )?;
    let mcfg = ModelConfig {
        input_dim: problem.input_dim,
        latent_dim: problem.latent_dim,
        hidden: problem.hidden.clone(),
        lambda: problem.lambda,
        seed: problem.seed,
    };
    let init = LoraeParams::init(&mcfg)?;
    let x = &data.images;
    let first = init.loss_batch(x, problem.lambda)?;
    let initial_loss = first.loss;

    let flat = |m: &LoraeParams| -> Vec<f64> {
        use crate::optim::Parameters;
        m.buffers().into_iter().flatten().copied().collect()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();

    let mut lipschitz: f64 = 0.0;
    let mut rng = crate::rng::derive(problem.seed, 0x11b5);
    let g0 = flat_grad(&first);
    let w0 = flat(&init);
    for _ in 0..8 {
        let mut pert = init.clone();
        {
            use crate::optim::Parameters;
            use rand_distr::{Distribution, StandardNormal};
            for buf in pert.buffers_mut() {
                for v in buf.iter_mut() {
                    let u: f64 = StandardNormal.sample(&mut rng);
                    *v += 1e-4 * u;
                }
            }
        }
        let g1 = flat_grad(&pert.loss_batch(x, problem.lambda)?);
        lipschitz = lipschitz.max(dist(&g0, &g1) / dist(&w0, &flat(&pert)));
    }

    // Warmup at a trial step size to bound gradients and probe curvature.
    let trial_delta = {
        let g = first.grad_norm();
        optim::delta_from_gamma(2.0 * g, problem.epsilon)
    };
    let trial_alpha = optim::theorem1_alpha(initial_loss, lipschitz.max(1e-12), trial_delta, horizons[0])?;
    let mut gamma: f64 = first.grad_norm();
    let mut model = init.clone();
    let mut prev_w = w0.clone();
    let mut prev_g = g0.clone();
    let mut adam = optim::AdamState::new(
        &model,
        optim::AdamConfig {
            alpha: trial_alpha,
            epsilon: problem.epsilon,
            ..optim::AdamConfig::default()
        },
    )?;
    for _ in 0..problem.warmup_steps {
        let out = model.loss_batch(x, problem.lambda)?;
        let g = flat_grad(&out);
        let w = flat(&model);
        gamma = gamma.max(out.grad_norm());
        let dw = dist(&w, &prev_w);
        if dw > 0.0 {
            lipschitz = lipschitz.max(dist(&g, &prev_g) / dw);
        }
        prev_w = w;
        prev_g = g;
        adam.step(&mut model, &out.grads)?;
    }
    let gamma = 2.0 * gamma;
    let delta = optim::delta_from_gamma(gamma, problem.epsilon);

    let mut rows = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let alpha = optim::theorem1_alpha(initial_loss, lipschitz, delta, t)?;
        let tcfg = TrainConfig {
            epochs: t,
            batch_size: problem.samples,
            alpha,
            lambda: problem.lambda,
            seed: problem.seed,
            deterministic: true,
            bias_correction: false,
            epsilon: problem.epsilon,
        };
        let (_, log) = optim::train(init.clone(), &data, &tcfg)?;
        rows.push(ConvergenceRow {
            horizon: t,
            alpha,
            min_grad_norm: log.min_grad_norm(),
        });
    }
    Ok(ConvergenceReport {
        initial_loss,
        gamma,
        lipschitz,
        delta,
        rows,
    })
}

/// Min-max distance ratios for `queries` test points against `refs` reference
/// points, both drawn from `pool` without overlap.
pub fn minmax_check(model: &LoraeParams, pool: &Dataset, queries: usize, refs: usize, seed: u64) -> Result<Vec<f64>> {
    if queries + refs > pool.len() {
        return Err(LoraeError::contract(format!(
            "minmax check needs {} samples, pool has {}",
            queries + refs,
            pool.len()
        )));
    }
    let picked = pool.random_subset(queries + refs, seed);
    let z = model.collapse_m().apply(&picked.images)?;
    let rank_m = latent::matrix_rank(&model.m)?;
    let idx_refs: Vec<usize> = (queries..queries + refs).collect();
    let ref_z = z.select_rows(&idx_refs);
    (0..queries)
        .map(|q| latent::minmax_ratio_latent(z.row(q), &ref_z, rank_m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_names_roundtrip() {
        for k in [SamplerKind::Mvg, SamplerKind::Gmm] {
            assert_eq!(k.name().parse::<SamplerKind>().unwrap(), k);
        }
        assert!("vae".parse::<SamplerKind>().is_err());
    }

    #[test]
    fn rank_ordering() {
        let row = |lambda, rank| SweepRow {
            lambda,
            rank,
            mid_normalized: 0.0,
            proxy_fid_gmm: 0.0,
            proxy_fid_mvg: 0.0,
            final_loss: 0.0,
            nuclear_norm_m: 0.0,
        };
        assert!(ranks_ordered(&[row(0.0, 9), row(1e-1, 2), row(1e-3, 5)]));
        assert!(!ranks_ordered(&[row(0.0, 4), row(1e-1, 5)]));
    }

    #[test]
    fn manifest_lists_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dir = RunDir::create(tmp.path().join("r")).unwrap();
        dir.write("a.txt", b"abc").unwrap();
        let m = dir.finish("r", 3, &serde_json::json!({"k": 1})).unwrap();
        assert_eq!(
            m.outputs["a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(tmp.path().join("r/manifest.json").exists());
    }
}
