//! Latent-space analysis: covariance spectrum and numerical rank, the min-max
//! distance ratio, and the `O(1/λ)` rank bound.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LoraeError, Result};
use crate::linalg::{self, Matrix};
use crate::model::Mlp;

/// Default threshold on max-normalized singular values.
pub const DEFAULT_TAU: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpectrum {
    /// Singular values of the latent covariance, descending.
    pub singular_values: Vec<f64>,
    /// `singular_values / max`; all zero when the covariance vanishes.
    pub normalized: Vec<f64>,
    pub rank: usize,
    pub tau: f64,
}

impl LatentSpectrum {
    /// Spectrum of the empirical covariance of `latents` (rows are samples).
    ///
    /// The covariance is PSD, so its eigenvalues (clamped at 0) are its
    /// singular values.
    pub fn from_latents(latents: &Matrix, tau: f64) -> Result<Self> {
        let cov = linalg::covariance(latents)?;
        let eig = linalg::sym_eig_psd(&cov)?;
        Ok(Self::from_values(eig.eigenvalues, tau))
    }

    pub fn from_values(singular_values: Vec<f64>, tau: f64) -> Self {
        let max = singular_values.iter().fold(0.0_f64, |m, v| m.max(*v));
        let normalized: Vec<f64> = if max > 0.0 {
            singular_values.iter().map(|v| v / max).collect()
        } else {
            vec![0.0; singular_values.len()]
        };
        let rank = normalized.iter().filter(|&&v| v > tau).count();
        LatentSpectrum {
            singular_values,
            normalized,
            rank,
            tau,
        }
    }

    /// Rank under a different threshold.
    pub fn rank_at(&self, tau: f64) -> usize {
        self.normalized.iter().filter(|&&v| v > tau).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,singular_value,normalized")?;
        for (i, (s, n)) in self.singular_values.iter().zip(&self.normalized).enumerate() {
            writeln!(w, "{i},{s:e},{n:e}")?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii")
    }
}

/// Latent spectrum of `ds` under an inference encoder (usually the collapsed one).
pub fn latent_spectrum(encoder: &Mlp, ds: &Dataset, tau: f64) -> Result<LatentSpectrum> {
    if ds.len() < 2 {
        return Err(LoraeError::contract("latent spectrum needs at least 2 samples"));
    }
    let z = encoder.apply(&ds.images)?;
    LatentSpectrum::from_latents(&z, tau)
}

/// Numerical rank of the bottleneck matrix (`σᵢ > 1e-10·σ_max`).
pub fn matrix_rank(m: &Matrix) -> Result<usize> {
    let dec = linalg::svd(m)?;
    Ok(linalg::numerical_rank(&dec.sigma, linalg::SV_CUTOFF))
}

/// `(d_max − d_min) / d_min` where `d(x, xⱼ) = ‖ME(x) − ME(xⱼ)‖₂ / rank(M)`.
///
/// `x` is a single input row, `others` holds the reference samples.
pub fn minmax_ratio(encoder: &Mlp, x: &[f64], others: &Matrix, rank_m: usize) -> Result<f64> {
    if others.rows() == 0 {
        return Err(LoraeError::contract("minmax_ratio needs at least one reference sample"));
    }
    if rank_m == 0 {
        return Err(LoraeError::contract("minmax_ratio needs rank(M) ≥ 1"));
    }
    let query = encoder.apply(&Matrix::new(1, x.len(), x.to_vec())?)?;
    let refs = encoder.apply(others)?;
    minmax_ratio_latent(query.row(0), &refs, rank_m)
}

/// [`minmax_ratio`] on already-encoded latents.
pub fn minmax_ratio_latent(query: &[f64], refs: &Matrix, rank_m: usize) -> Result<f64> {
    if rank_m == 0 {
        return Err(LoraeError::contract("minmax_ratio needs rank(M) ≥ 1"));
    }
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for j in 0..refs.rows() {
        let d = refs
            .row(j)
            .iter()
            .zip(query)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / rank_m as f64;
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if !(dmin > 0.0) {
        return Err(LoraeError::Degenerate(
            "query embedding coincides with a reference embedding (d_min = 0)".into(),
        ));
    }
    Ok((dmax - dmin) / dmin)
}

/// `(1/λ)(c₁ − c₂) + c₃` with the unspecified positive constant taken as 1.
///
/// `c1` is the initial reconstruction loss, `c3` the initial `‖M‖_*`, and `c2`
/// the final reconstruction loss (0 when unknown). Reported for trends only.
pub fn rank_bound(lambda: f64, c1_initial_mse: f64, c2_final_mse: Option<f64>, c3_initial_nuclear: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(LoraeError::contract(format!("rank bound needs λ > 0, got {lambda}")));
    }
    let c2 = c2_final_mse.unwrap_or(0.0).max(0.0);
    Ok((c1_initial_mse - c2) / lambda + c3_initial_nuclear)
}
