//! The LoRAE network: encoder `E`, bottleneck matrix `M`, decoder `D`.
//!
//! Training objective over a batch `B`:
//!
//! ```text
//! L_B = (1/|B|) Σ_{x∈B} ‖x − D(M(E(x)))‖²  +  λ‖M‖_*
//! ```
//!
//! The reconstruction term is differentiated by the autodiff tape; the
//! nuclear-norm term contributes the analytic subgradient `λ·U_r V_rᵀ` to the
//! gradient of `M`. After training, [`LoraeParams::collapse_m`] folds `M` into
//! the last encoder layer.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{LoraeError, Result};
use crate::linalg::{self, Matrix};
use crate::optim::Parameters;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    /// Nuclear-norm penalty λ. Zero gives the plain autoencoder baseline.
    pub lambda: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale dense architecture for 32×32 images: 1024 → 256 → 64 → l.
    pub fn desk(latent_dim: usize, lambda: f64, seed: u64) -> Self {
        ModelConfig {
            input_dim: 32 * 32,
            latent_dim,
            hidden: vec![256, 64],
            lambda,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(LoraeError::contract(format!(
                "model dimensions must be positive (input {}, latent {}, hidden {:?})",
                self.input_dim, self.latent_dim, self.hidden
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LoraeError::contract(format!(
                "λ must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Fully connected layer computing `x · weight + bias` for row-vector inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound));
        Dense {
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Dense layers with ReLU between them and `output` after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: Activation,
}

/// Graph handles of an [`Mlp`] recorded on a tape.
pub struct MlpVars {
    pub out: Var,
    /// `(weight, bias)` per layer.
    pub params: Vec<(Var, Var)>,
}

impl Mlp {
    pub fn new(widths: &[usize], output: Activation, rng: &mut rng::Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        Mlp { layers, output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    /// Record the forward pass on `g`. Parameters are gradient leaves iff `trainable`.
    pub fn record(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<MlpVars> {
        let mut h = x;
        let mut params = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut w = Tensor::from_matrix(layer.weight.clone());
            let mut b = Tensor::vector(layer.bias.clone());
            if trainable {
                w = w.with_grad();
                b = b.with_grad();
            }
            let wv = g.leaf(w);
            let bv = g.leaf(b);
            params.push((wv, bv));
            h = g.matmul(h, wv)?;
            h = g.add_bias(h, bv)?;
            if i < last {
                h = g.relu(h);
            } else if self.output == Activation::Tanh {
                h = g.tanh(h);
            }
        }
        Ok(MlpVars { out: h, params })
    }

    /// Apply to a batch of row vectors.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(LoraeError::contract(format!(
                "input width {} does not match layer fan-in {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_matrix(x.clone()));
        let vars = self.record(&mut g, xv, false)?;
        g.take_value(vars.out).into_matrix()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraeParams {
    pub encoder: Mlp,
    /// The `l × l` bottleneck matrix.
    pub m: Matrix,
    pub decoder: Mlp,
    pub latent_dim: usize,
}

/// Outputs of [`LoraeParams::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `E(x)`
    pub z_pre: Matrix,
    /// `M(E(x)) = z_pre · Mᵀ`
    pub z: Matrix,
    /// `D(z)`
    pub x_hat: Matrix,
}

/// Value and gradient of the batch objective.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Mean squared reconstruction error over the batch.
    pub recon: f64,
    /// `λ‖M‖_*`
    pub penalty: f64,
    pub nuclear_norm: f64,
    /// One buffer per parameter, in [`Parameters`] order.
    pub grads: Vec<Vec<f64>>,
}

impl LossOutput {
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl LoraeParams {
    /// Glorot-initialized encoder/decoder and `M = I`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let mut enc_widths = vec![config.input_dim];
        enc_widths.extend(&config.hidden);
        enc_widths.push(config.latent_dim);
        let dec_widths: Vec<usize> = enc_widths.iter().rev().copied().collect();
        let encoder = Mlp::new(&enc_widths, Activation::Identity, &mut rng);
        let decoder = Mlp::new(&dec_widths, Activation::Tanh, &mut rng);
        Ok(LoraeParams {
            encoder,
            m: Matrix::identity(config.latent_dim),
            decoder,
            latent_dim: config.latent_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(LoraeError::contract(format!(
                "batch has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if x.rows() == 0 {
            return Err(LoraeError::contract("empty batch"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_matrix(x.clone()));
        let rec = self.record(&mut g, xv, false)?;
        Ok(Forward {
            z_pre: g.take_value(rec.z_pre).into_matrix()?,
            z: g.take_value(rec.z).into_matrix()?,
            x_hat: g.take_value(rec.x_hat).into_matrix()?,
        })
    }

    fn record(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Recorded> {
        let enc = self.encoder.record(g, x, trainable)?;
        let mut mt = Tensor::from_matrix(self.m.clone());
        if trainable {
            mt = mt.with_grad();
        }
        let m = g.leaf(mt);
        let z = g.matmul_t(enc.out, m)?;
        let dec = self.decoder.record(g, z, trainable)?;
        Ok(Recorded {
            z_pre: enc.out,
            z,
            x_hat: dec.out,
            enc: enc.params,
            m,
            dec: dec.params,
        })
    }

    /// Batch objective and its (sub)gradient with respect to every parameter.
    pub fn loss_batch(&self, batch: &Matrix, lambda: f64) -> Result<LossOutput> {
        self.loss_with_target(batch, batch, lambda)
    }

    /// Batch objective with an explicit reconstruction target.
    pub fn loss_with_target(&self, batch: &Matrix, target: &Matrix, lambda: f64) -> Result<LossOutput> {
        self.check_input(batch)?;
        if target.shape() != [batch.rows(), self.decoder.out_dim()] {
            return Err(LoraeError::dim("loss target", &target.shape(), &batch.shape()));
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_matrix(batch.clone()));
        let tv = g.constant(Tensor::from_matrix(target.clone()));
        let rec = self.record(&mut g, xv, true)?;
        let sq = g.mse(rec.x_hat, tv)?;
        let recon_v = g.scale(sq, 1.0 / batch.rows() as f64);
        g.backward(recon_v)?;
        let recon = g.value(recon_v).item();

        let (nuclear, sub) = linalg::nuclear_norm_with_subgradient(&self.m)?;
        let penalty = lambda * nuclear;

        let grad_of = |v: Var| g.grad(v).expect("trainable leaf has a gradient").to_vec();
        let mut grads = Vec::with_capacity(2 * (rec.enc.len() + rec.dec.len()) + 1);
        for &(w, b) in &rec.enc {
            grads.push(grad_of(w));
            grads.push(grad_of(b));
        }
        let mut gm = grad_of(rec.m);
        if lambda != 0.0 {
            for (d, s) in gm.iter_mut().zip(sub.as_slice()) {
                *d += lambda * s;
            }
        }
        grads.push(gm);
        for &(w, b) in &rec.dec {
            grads.push(grad_of(w));
            grads.push(grad_of(b));
        }
        Ok(LossOutput {
            loss: recon + penalty,
            recon,
            penalty,
            nuclear_norm: nuclear,
            grads,
        })
    }

    /// Value of the batch objective only (no gradients).
    pub fn objective(&self, batch: &Matrix, lambda: f64) -> Result<f64> {
        let fwd = self.forward(batch)?;
        let sq: f64 = fwd
            .x_hat
            .as_slice()
            .iter()
            .zip(batch.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let penalty = if lambda != 0.0 {
            lambda * linalg::nuclear_norm(&self.m)?
        } else {
            0.0
        };
        Ok(sq / batch.rows() as f64 + penalty)
    }

    /// Inference encoder with `M` folded into the last layer:
    /// weight `W·Mᵀ`, bias `M·b`.
    pub fn collapse_m(&self) -> Mlp {
        let mut enc = self.encoder.clone();
        let last = enc.layers.last_mut().expect("encoder has at least one layer");
        last.weight = last.weight.matmul_t(&self.m).expect("latent widths agree");
        last.bias = self.m.matvec(&last.bias).expect("latent widths agree");
        enc
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.m.is_finite()
    }

    pub fn to_bytes(&self, config: &ModelConfig) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            encoder: self.encoder.layers.iter().map(|l| [l.fan_in(), l.fan_out()]).collect(),
            decoder: self.decoder.layers.iter().map(|l| [l.fan_in(), l.fan_out()]).collect(),
            latent_dim: self.latent_dim,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for buf in self.buffers() {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, LoraeParams)> {
        let magic_len = CHECKPOINT_MAGIC.len();
        if bytes.len() < magic_len + 8 || &bytes[..magic_len] != CHECKPOINT_MAGIC {
            return Err(LoraeError::Format {
                offset: 0,
                message: "not a LoRAE checkpoint (bad magic)".into(),
            });
        }
        let hlen = u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().unwrap()) as usize;
        let start = magic_len + 8;
        let header_bytes = bytes.get(start..start + hlen).ok_or_else(|| LoraeError::Format {
            offset: start,
            message: format!("header of {hlen} bytes truncated"),
        })?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(LoraeError::Format {
                offset: magic_len,
                message: format!("unsupported checkpoint version {}", header.version),
            });
        }
        let blank = |shapes: &[[usize; 2]], output| Mlp {
            layers: shapes
                .iter()
                .map(|&[i, o]| Dense {
                    weight: Matrix::zeros(i, o),
                    bias: vec![0.0; o],
                })
                .collect(),
            output,
        };
        let mut params = LoraeParams {
            encoder: blank(&header.encoder, Activation::Identity),
            m: Matrix::zeros(header.latent_dim, header.latent_dim),
            decoder: blank(&header.decoder, Activation::Tanh),
            latent_dim: header.latent_dim,
        };
        let mut offset = start + hlen;
        let total: usize = params.buffers().iter().map(|b| b.len()).sum();
        if bytes.len() != offset + 8 * total {
            return Err(LoraeError::Format {
                offset,
                message: format!(
                    "expected {} bytes of parameters, found {}",
                    8 * total,
                    bytes.len().saturating_sub(offset)
                ),
            });
        }
        for buf in params.buffers_mut() {
            for v in buf.iter_mut() {
                *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
                offset += 8;
            }
        }
        Ok((header.config, params))
    }

    pub fn save(&self, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes(config)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, LoraeParams)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        LoraeParams::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LORAECK\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    encoder: Vec<[usize; 2]>,
    decoder: Vec<[usize; 2]>,
    latent_dim: usize,
}

struct Recorded {
    z_pre: Var,
    z: Var,
    x_hat: Var,
    enc: Vec<(Var, Var)>,
    m: Var,
    dec: Vec<(Var, Var)>,
}

impl Parameters for Mlp {
    fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{i}.weight"), format!("{i}.bias")])
            .collect()
    }
}

impl Parameters for LoraeParams {
    fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.encoder.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.m.as_slice());
        for l in &self.decoder.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.m.as_mut_slice());
        for l in &mut self.decoder.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.encoder.layers.len() {
            out.push(format!("encoder.{i}.weight"));
            out.push(format!("encoder.{i}.bias"));
        }
        out.push("m".to_string());
        for i in 0..self.decoder.layers.len() {
            out.push(format!("decoder.{i}.weight"));
            out.push(format!("decoder.{i}.bias"));
        }
        out
    }
}
