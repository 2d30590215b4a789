//! Downstream classification with a small MLP head on a frozen encoder.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LoraeError, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, Mlp};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::tensor::{Graph, Tensor};

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 100,
            batch_size: 32,
            alpha: 1e-3,
            seed: 0,
        }
    }
}

/// Hidden ReLU layer plus a linear layer to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub mlp: Mlp,
}

impl ProbeHead {
    pub fn new(latent_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::derive(seed, 0x0b5e);
        ProbeHead {
            mlp: Mlp::new(&[latent_dim, hidden, NUM_CLASSES], Activation::Identity, &mut r),
        }
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.mlp.apply(features)
    }

    /// Mean cross-entropy and gradients for every head buffer.
    pub fn loss_and_grads(&self, features: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_matrix(features.clone()));
        let vars = self.mlp.record(&mut g, x, true)?;
        let loss = g.softmax_cross_entropy(vars.out, labels)?;
        g.backward(loss)?;
        let mut grads = Vec::with_capacity(2 * vars.params.len());
        for (w, b) in vars.params {
            grads.push(g.grad(w).expect("trainable").to_vec());
            grads.push(g.grad(b).expect("trainable").to_vec());
        }
        Ok((g.value(loss).item(), grads))
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(features)?))
    }
}

pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `predicted` equal to `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub head: ProbeHead,
    /// Training-subset accuracy after each epoch (entry 0 is before training).
    pub accuracy_curve: Vec<f64>,
}

fn labels_of(ds: &Dataset) -> Result<Vec<usize>> {
    let labels = ds
        .labels_usize()
        .ok_or_else(|| LoraeError::contract("probe needs a labeled dataset"))?;
    if let Some(&bad) = labels.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(LoraeError::contract(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(labels)
}

/// Train a fresh head on `encoder(subset)`; the encoder is only read.
pub fn train_probe(encoder: &Mlp, subset: &Dataset, config: &ProbeConfig) -> Result<ProbeRun> {
    let labels = labels_of(subset)?;
    if subset.len() < 10 {
        return Err(LoraeError::contract(format!(
            "probe subset needs at least 10 samples, got {}",
            subset.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(LoraeError::contract("probe batch size must be positive"));
    }
    let features = encoder.apply(&subset.images)?;
    let mut head = ProbeHead::new(features.cols(), config.hidden, config.seed);
    let mut adam = AdamState::new(&head.mlp, AdamConfig::with_alpha(config.alpha))?;
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut r = rng::derive(config.seed, 0x5ba7);
    let mut curve = vec![accuracy(&head.predict(&features)?, &labels)];
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch_size) {
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = head.loss_and_grads(&x, &y)?;
            if !loss.is_finite() {
                return Err(LoraeError::Training {
                    param: "probe".into(),
                    what: "loss",
                });
            }
            adam.step(&mut head.mlp, &grads)?;
        }
        curve.push(accuracy(&head.predict(&features)?, &labels));
    }
    Ok(ProbeRun {
        head,
        accuracy_curve: curve,
    })
}

/// Test accuracy of `head` on `encoder(test)`.
pub fn evaluate(head: &ProbeHead, encoder: &Mlp, test: &Dataset) -> Result<f64> {
    let labels = labels_of(test)?;
    let features = encoder.apply(&test.images)?;
    Ok(accuracy(&head.predict(&features)?, &labels))
}

/// Draw `s` labeled samples. Uniform for `s < 100`, otherwise stratified with
/// per-class counts proportional to the pool (largest remainders first).
pub fn select_subset(pool: &Dataset, s: usize, seed: u64) -> Result<Dataset> {
    let labels = labels_of(pool)?;
    if s < 10 || s > pool.len() {
        return Err(LoraeError::contract(format!(
            "subset size {s} must lie in 10..={}",
            pool.len()
        )));
    }
    if s < 100 {
        return Ok(pool.random_subset(s, seed));
    }
    let mut r = rng::seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut r);
    }
    let mut counts = proportional_counts(&by_class, s, false);
    let present = by_class.iter().filter(|m| !m.is_empty()).count();
    if counts.iter().zip(&by_class).any(|(&k, m)| k == 0 && !m.is_empty()) {
        counts = proportional_counts(&by_class, s, true);
        if counts.iter().filter(|&&k| k > 0).count() < present {
            log::warn!("subset of size {s} still misses a class after resampling");
        }
    }
    let mut idx: Vec<usize> = by_class
        .iter()
        .zip(&counts)
        .flat_map(|(m, &k)| m[..k].iter().copied())
        .collect();
    idx.shuffle(&mut r);
    Ok(pool.select(&idx))
}

fn proportional_counts(by_class: &[Vec<usize>], s: usize, at_least_one: bool) -> Vec<usize> {
    let n: usize = by_class.iter().map(Vec::len).sum();
    let mut counts: Vec<usize> = Vec::with_capacity(by_class.len());
    let mut rema: Vec<(f64, usize)> = Vec::new();
    for (c, m) in by_class.iter().enumerate() {
        let exact = s as f64 * m.len() as f64 / n as f64;
        let mut k = exact.floor() as usize;
        if at_least_one && !m.is_empty() {
            k = k.max(1);
        }
        counts.push(k.min(m.len()));
        rema.push((exact - exact.floor(), c));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut total: usize = counts.iter().sum();
    for &(_, c) in rema.iter().cycle().take(4 * by_class.len()) {
        if total >= s {
            break;
        }
        if counts[c] < by_class[c].len() {
            counts[c] += 1;
            total += 1;
        }
    }
    // Trim the largest classes if the minimum-one rule overshot.
    while total > s {
        let c = (0..counts.len())
            .max_by_key(|&c| (counts[c], usize::MAX - c))
            .expect("non-empty");
        counts[c] -= 1;
        total -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub model_tag: String,
    pub lambda: f64,
    pub subset_size: usize,
    pub seed: u64,
    pub accuracy: f64,
}

pub fn write_probe_csv<W: Write>(records: &[ProbeRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "model_tag,lambda,subset_size,seed,accuracy")?;
    for r in records {
        writeln!(
            w,
            "{},{:e},{},{},{}",
            r.model_tag, r.lambda, r.subset_size, r.seed, r.accuracy
        )?;
    }
    Ok(())
}
