//! ADAM as written in the training algorithm, and the training loop.
//!
//! ```text
//! m_t = β₁ m_{t−1} + (1 − β₁) g
//! v_t = β₂ v_{t−1} + (1 − β₂) g²
//! θ  ← θ − α · m_t / (√v_t + ε)
//! ```
//!
//! There is no bias correction; the convergence result for the deterministic
//! (full-batch) regime is stated for exactly this recurrence. Standard
//! bias-corrected ADAM is available through [`AdamConfig::bias_correction`]
//! for practical runs.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LoraeError, Result};
use crate::model::LoraeParams;
use crate::rng;

/// A flat view of trainable buffers, in a fixed order.
pub trait Parameters {
    fn buffers(&self) -> Vec<&[f64]>;
    fn buffers_mut(&mut self) -> Vec<&mut [f64]>;
    /// Human-readable name per buffer, same order as [`Parameters::buffers`].
    fn names(&self) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Off for the algorithm as analysed; on gives textbook ADAM.
    pub bias_correction: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bias_correction: false,
        }
    }
}

impl AdamConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        AdamConfig {
            alpha,
            ..AdamConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.alpha > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(LoraeError::contract(format!("invalid ADAM hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.buffers().iter().map(|b| vec![0.0; b.len()]).collect();
        Ok(AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            config,
        })
    }

    /// One update of every buffer in `params` from `grads` (same order).
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[Vec<f64>]) -> Result<()> {
        let names = params.names();
        let mut bufs = params.buffers_mut();
        if bufs.len() != grads.len() || bufs.len() != self.m.len() {
            return Err(LoraeError::dim("adam_step", &[bufs.len()], &[grads.len()]));
        }
        for (i, (b, g)) in bufs.iter().zip(grads).enumerate() {
            if b.len() != g.len() || b.len() != self.m[i].len() {
                return Err(LoraeError::dim("adam_step", &[b.len()], &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(LoraeError::Training {
                    param: names[i].clone(),
                    what: "gradient",
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
            bias_correction,
        } = self.config;
        let (c1, c2) = if bias_correction {
            let t = self.t as i32;
            (1.0 - beta1.powi(t), 1.0 - beta2.powi(t))
        } else {
            (1.0, 1.0)
        };
        for (((theta, g), m), v) in bufs.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..theta.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                if bias_correction {
                    theta[j] -= alpha * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
                } else {
                    theta[j] -= alpha * m[j] / (v[j].sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<P: Parameters + ?Sized>(state: &mut AdamState, params: &mut P, grads: &[Vec<f64>]) -> Result<()> {
    state.step(params, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Full-batch steps (one per epoch) instead of shuffled minibatches.
    pub deterministic: bool,
    #[serde(default)]
    pub bias_correction: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            alpha: 1e-3,
            lambda: 1e-3,
            seed: 0,
            deterministic: false,
            bias_correction: false,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            bias_correction: self.bias_correction,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub penalty: f64,
    pub grad_norm: f64,
    pub nuclear_norm_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub steps: Vec<StepMetrics>,
}

impl MetricLog {
    pub const CSV_HEADER: &'static str = "step,loss,recon,penalty,grad_norm,nuclear_norm_m";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e}",
                s.step, s.loss, s.recon, s.penalty, s.grad_norm, s.nuclear_norm_m
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }

    /// `min_{t<T} ‖∇L(w_t)‖₂` for `T` = number of logged steps.
    pub fn min_grad_norm(&self) -> f64 {
        self.steps.iter().map(|s| s.grad_norm).fold(f64::INFINITY, f64::min)
    }

    pub fn last(&self) -> Option<&StepMetrics> {
        self.steps.last()
    }
}

/// Minimize the batch objective with the configured ADAM variant.
///
/// Each logged step records the objective and gradient norm at the parameters
/// *before* that step's update.
pub fn train(model: LoraeParams, data: &Dataset, config: &TrainConfig) -> Result<(LoraeParams, MetricLog)> {
    let mut model = model;
    let log = train_in_place(&mut model, data, config, |_| {})?;
    Ok((model, log))
}

/// [`train`] on a borrowed model, calling `on_step` after each logged step.
pub fn train_in_place(
    model: &mut LoraeParams,
    data: &Dataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<MetricLog> {
    let n = data.len();
    if n == 0 {
        return Err(LoraeError::contract("training set is empty"));
    }
    if config.batch_size == 0 && !config.deterministic {
        return Err(LoraeError::contract("batch size must be positive"));
    }
    let mut adam = AdamState::new(model, config.adam())?;
    let mut log = MetricLog::default();
    let mut rng = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..n).collect();

    let mut run_step = |model: &mut LoraeParams, batch: &crate::Matrix, log: &mut MetricLog| -> Result<()> {
        let out = model.loss_batch(batch, config.lambda)?;
        if !out.loss.is_finite() {
            return Err(LoraeError::Training {
                param: "loss".into(),
                what: "value",
            });
        }
        let metrics = StepMetrics {
            step: log.steps.len(),
            loss: out.loss,
            recon: out.recon,
            penalty: out.penalty,
            grad_norm: out.grad_norm(),
            nuclear_norm_m: out.nuclear_norm,
        };
        adam.step(model, &out.grads)?;
        on_step(&metrics);
        log.steps.push(metrics);
        Ok(())
    };

    for _ in 0..config.epochs {
        if config.deterministic {
            run_step(model, &data.images, &mut log)?;
            continue;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.images.select_rows(chunk);
            run_step(model, &batch, &mut log)?;
        }
    }
    if !model.is_finite() {
        return Err(LoraeError::Training {
            param: "model".into(),
            what: "parameter",
        });
    }
    Ok(log)
}

/// Step size prescribed by the deterministic-ADAM convergence theorem:
/// `α = √(2(L₀ − L*) / (K δ² T))` with `L*` lower-bounded by 0.
pub fn theorem1_alpha(initial_loss: f64, k_lipschitz: f64, delta: f64, horizon: usize) -> Result<f64> {
    if !(initial_loss > 0.0) || !(k_lipschitz > 0.0) || !(delta > 0.0) || horizon == 0 {
        return Err(LoraeError::contract(format!(
            "theorem1_alpha needs positive inputs (L0 {initial_loss}, K {k_lipschitz}, δ {delta}, T {horizon})"
        )));
    }
    Ok((2.0 * initial_loss / (k_lipschitz * delta * delta * horizon as f64)).sqrt())
}

/// `δ = γ / ε` for a gradient-norm bound `γ` and ADAM's `ε`.
pub fn delta_from_gamma(gamma: f64, epsilon: f64) -> f64 {
    gamma / epsilon
}
