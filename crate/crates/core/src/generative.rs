//! Generation from the latent space: Gaussian (MVG) and Gaussian-mixture
//! (GMM) density fits, sampling, latent interpolation, and a PCA-feature
//! Fréchet distance used as a proxy for FID.
//!
//! Proxy-FID values are only comparable with each other; they are not
//! Inception-feature FID scores.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LoraeError, Result};
use crate::linalg::{self, Matrix};
use crate::model::Mlp;
use crate::rng;

/// Relative ridge added to fitted covariances (times the mean eigenvalue).
pub const RIDGE_REL: f64 = 1e-6;
/// Absolute ridge floor, used when a covariance vanishes.
pub const RIDGE_FLOOR: f64 = 1e-12;
/// Normalized-eigenvalue cutoff for the GMM's projected subspace.
pub const GMM_SUBSPACE_TOL: f64 = 1e-6;
pub const GMM_MAX_ITER: usize = 200;
/// Stop when the per-sample objective gains less than this.
pub const GMM_TOL: f64 = 1e-6;
const GMM_MAX_REINIT: usize = 3;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn ridge_for(cov: &Matrix) -> f64 {
    (RIDGE_REL * cov.trace() / cov.rows() as f64).max(RIDGE_FLOOR)
}

fn add_ridge(cov: &Matrix, ridge: f64) -> Matrix {
    let mut out = cov.clone();
    for i in 0..out.rows() {
        out.set(i, i, out.get(i, i) + ridge);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvgModel {
    pub mean: Vec<f64>,
    /// Empirical covariance, without ridge.
    pub cov: Matrix,
    pub ridge: f64,
    /// Cholesky factor of `cov + ridge·I`.
    pub chol: Matrix,
}

pub fn fit_mvg(latents: &Matrix) -> Result<MvgModel> {
    let cov = linalg::covariance(latents)?;
    let mean = latents.column_means();
    let ridge = ridge_for(&cov);
    let chol = linalg::cholesky(&add_ridge(&cov, ridge))?;
    Ok(MvgModel { mean, cov, ridge, chol })
}

fn gaussian_draw(mean: &[f64], chol: &Matrix, rng: &mut rng::Rng, out: &mut [f64]) {
    let d = mean.len();
    let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    for i in 0..d {
        let row = chol.row(i);
        let mut s = mean[i];
        for j in 0..=i {
            s += row[j] * u[j];
        }
        out[i] = s;
    }
}

/// `count` draws of `μ + L·u`, `u ~ N(0, I)`.
pub fn sample_mvg(model: &MvgModel, count: usize, seed: u64) -> Matrix {
    let d = model.mean.len();
    let mut rng = rng::seeded(seed);
    let mut out = Matrix::zeros(count, d);
    for i in 0..count {
        gaussian_draw(&model.mean, &model.chol, &mut rng, out.row_mut(i));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    /// `k × r`, in projected coordinates.
    pub means: Matrix,
    /// `r × r` each, ridge included.
    pub covs: Vec<Matrix>,
    pub chols: Vec<Matrix>,
    /// `l × r` orthonormal basis of the top-`r` latent directions.
    pub projection: Matrix,
    /// Latent mean subtracted before projecting.
    pub center: Vec<f64>,
    pub ridge: f64,
}

/// A fitted mixture together with its EM history.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean per-sample (ridge-penalized) log-likelihood at each EM iterate.
    pub log_likelihood: Vec<f64>,
    /// Iterations at which an empty component was reseeded; the objective is
    /// only monotone between these points.
    pub reinitialized_at: Vec<usize>,
}

impl GmmModel {
    pub fn subspace_dim(&self) -> usize {
        self.projection.cols()
    }

    /// Project latents into the model's coordinates.
    pub fn project(&self, latents: &Matrix) -> Result<Matrix> {
        latents.sub_row_vector(&self.center).matmul(&self.projection)
    }

    /// Per-sample log density and responsibilities of projected points.
    pub fn responsibilities(&self, y: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let logp = component_log_probs(y, &self.weights, &self.means, &self.chols)?;
        Ok(normalize_log_probs(logp))
    }
}

/// `n × k` matrix of `log wₖ + log N(yᵢ | μₖ, Σₖ)`.
fn component_log_probs(y: &Matrix, weights: &[f64], means: &Matrix, chols: &[Matrix]) -> Result<Matrix> {
    let (n, r) = (y.rows(), y.cols());
    let k = weights.len();
    let mut out = Matrix::zeros(n, k);
    for c in 0..k {
        let l = &chols[c];
        let linv = lower_inverse(l);
        let log_det: f64 = 2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>();
        let centered = y.sub_row_vector(means.row(c));
        // rows of centered · L⁻ᵀ are L⁻¹(yᵢ − μ)
        let white = centered.matmul_t(&linv)?;
        let base = weights[c].ln() - 0.5 * (r as f64 * LN_2PI + log_det);
        for i in 0..n {
            let q: f64 = white.row(i).iter().map(|v| v * v).sum();
            out.set(i, c, base - 0.5 * q);
        }
    }
    Ok(out)
}

/// Row-wise log-sum-exp; returns per-row log densities and the normalized
/// responsibilities.
fn normalize_log_probs(mut logp: Matrix) -> (Vec<f64>, Matrix) {
    let mut ll = Vec::with_capacity(logp.rows());
    for i in 0..logp.rows() {
        let row = logp.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + s.ln();
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
        ll.push(lse);
    }
    (ll, logp)
}

fn lower_inverse(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l.get(i, k) * inv.get(k, col);
            }
            inv.set(i, col, s / l.get(i, i));
        }
    }
    inv
}

/// Fit a `k`-component full-covariance mixture by EM in the top-`r` latent subspace.
///
/// `r` is the numerical rank of the latent covariance (at least `k`). Means
/// are seeded k-means++ style. Each covariance update is `Sₖ + ρI`. That is
/// the exact M-step when every component density carries the factor
/// `exp(−(ρ/2)·tr(Σₖ⁻¹))`, so the returned trace records the mean log of that
/// tilted mixture, which EM never decreases between reseeds.
pub fn fit_gmm(latents: &Matrix, k: usize, seed: u64) -> Result<GmmFit> {
    let n = latents.rows();
    if k == 0 {
        return Err(LoraeError::contract("GMM needs k ≥ 1"));
    }
    if n < 10 * k {
        return Err(LoraeError::contract(format!(
            "GMM with k = {k} needs at least {} samples, got {n}",
            10 * k
        )));
    }
    let l = latents.cols();
    let center = latents.column_means();
    let cov = linalg::covariance(latents)?;
    let eig = linalg::sym_eig_psd(&cov)?;
    let r = linalg::numerical_rank(&eig.eigenvalues, GMM_SUBSPACE_TOL).max(k).min(l);
    let projection = eig.eigenvectors.first_cols(r);
    let y = latents.sub_row_vector(&center).matmul(&projection)?;

    let global = linalg::covariance(&y)?;
    let ridge = ridge_for(&global);
    let global_reg = add_ridge(&global, ridge);
    let global_chol = linalg::cholesky(&global_reg)?;

    let mut rng = rng::seeded(seed);
    let mut means = kmeans_pp(&y, k, &mut rng);
    let mut covs = vec![global_reg.clone(); k];
    let mut chols = vec![global_chol.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut trace = Vec::new();
    let mut reinit = Vec::new();
    for iter in 0..GMM_MAX_ITER {
        // E-step at the current parameters.
        let mut logp = component_log_probs(&y, &weights, &means, &chols)?;
        for (c, l) in chols.iter().enumerate() {
            // tr(Σ⁻¹) = ‖L⁻¹‖²_F
            let tilt = 0.5 * ridge * lower_inverse(l).frobenius_norm().powi(2);
            for i in 0..n {
                logp.set(i, c, logp.get(i, c) - tilt);
            }
        }
        let (ll, resp) = normalize_log_probs(logp);
        let objective = ll.iter().sum::<f64>() / n as f64;
        if !objective.is_finite() {
            return Err(LoraeError::Numerical("GMM log-likelihood became non-finite".into()));
        }
        let converged =
            trace.last().is_some_and(|&prev: &f64| objective - prev < GMM_TOL) && reinit.last() != Some(&iter);
        trace.push(objective);
        if converged {
            break;
        }

        // M-step.
        let mass: Vec<f64> = (0..k).map(|c| (0..n).map(|i| resp.get(i, c)).sum()).collect();
        let mut reseeded = false;
        for c in 0..k {
            if mass[c] < 1e-8 {
                if reinit.len() >= GMM_MAX_REINIT {
                    return Err(LoraeError::Degenerate(format!(
                        "GMM component {c} collapsed after {GMM_MAX_REINIT} reinitializations"
                    )));
                }
                let worst = (0..n).min_by(|&a, &b| ll[a].total_cmp(&ll[b])).expect("n > 0");
                means.row_mut(c).copy_from_slice(y.row(worst));
                covs[c] = global_reg.clone();
                chols[c] = global_chol.clone();
                weights[c] = 1.0 / k as f64;
                reseeded = true;
                continue;
            }
            let nk = mass[c];
            let mut mu = vec![0.0; r];
            for i in 0..n {
                let w = resp.get(i, c);
                for (m, v) in mu.iter_mut().zip(y.row(i)) {
                    *m += w * v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut weighted = y.sub_row_vector(&mu);
            for i in 0..n {
                let s = resp.get(i, c).sqrt();
                weighted.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
            let sc = weighted.t_matmul(&weighted)?;
            let mut sigma = sc.scale(1.0 / nk);
            for a in 0..r {
                sigma.set(a, a, sigma.get(a, a) + ridge);
            }
            linalg::symmetrize(&mut sigma);
            chols[c] = linalg::cholesky(&sigma)?;
            covs[c] = sigma;
            means.row_mut(c).copy_from_slice(&mu);
            weights[c] = nk / n as f64;
        }
        if reseeded {
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            reinit.push(iter + 1);
        }
    }

    Ok(GmmFit {
        model: GmmModel {
            k,
            weights,
            means,
            covs,
            chols,
            projection,
            center,
            ridge,
        },
        log_likelihood: trace,
        reinitialized_at: reinit,
    })
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn kmeans_pp(y: &Matrix, k: usize, rng: &mut rng::Rng) -> Matrix {
    let n = y.rows();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, z)| (x - z) * (x - z)).sum::<f64>();
    let mut centers = Matrix::zeros(k, y.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(y.row(first));
    let mut best: Vec<f64> = (0..n).map(|i| dist2(y.row(i), y.row(first))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(y.row(pick));
        for i in 0..n {
            best[i] = best[i].min(dist2(y.row(i), y.row(pick)));
        }
    }
    centers
}

/// Draw a component per sample from the weights, a Gaussian point in the
/// projected space, and map it back to the latent space.
pub fn sample_gmm(model: &GmmModel, count: usize, seed: u64) -> Matrix {
    sample_gmm_labeled(model, count, seed).0
}

/// [`sample_gmm`] that also returns the component index of each sample.
pub fn sample_gmm_labeled(model: &GmmModel, count: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let r = model.subspace_dim();
    let mut rng = rng::seeded(seed);
    let mut projected = Matrix::zeros(count, r);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = model.k - 1;
        for (c, w) in model.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = c;
                break;
            }
        }
        labels.push(comp);
        gaussian_draw(
            model.means.row(comp),
            &model.chols[comp],
            &mut rng,
            projected.row_mut(i),
        );
    }
    let mut out = projected.matmul_t(&model.projection).expect("projection is l × r");
    for i in 0..count {
        for (v, c) in out.row_mut(i).iter_mut().zip(&model.center) {
            *v += c;
        }
    }
    (out, labels)
}

/// Decoded frames along the straight latent path between two inputs.
#[derive(Debug, Clone)]
pub struct Interpolation {
    /// `steps × l`
    pub latents: Matrix,
    /// `steps × input_dim`
    pub images: Matrix,
}

/// `z(t) = (1 − t)·z₁ + t·z₂` for `t = 0, 1/(steps−1), …, 1`, decoded.
pub fn interpolate(encoder: &Mlp, decoder: &Mlp, x1: &[f64], x2: &[f64], steps: usize) -> Result<Interpolation> {
    if steps < 2 {
        return Err(LoraeError::contract(format!(
            "interpolation needs at least 2 steps, got {steps}"
        )));
    }
    let pair = Matrix::from_rows(&[x1, x2]);
    let z = encoder.apply(&pair)?;
    let (z1, z2) = (z.row(0), z.row(1));
    let l = z.cols();
    let mut latents = Matrix::zeros(steps, l);
    for s in 0..steps {
        let row = latents.row_mut(s);
        if s == 0 {
            row.copy_from_slice(z1);
        } else if s == steps - 1 {
            row.copy_from_slice(z2);
        } else {
            let t = s as f64 / (steps - 1) as f64;
            // z₁ + t(z₂ − z₁): equal endpoints give bitwise-equal frames
            for j in 0..l {
                row[j] = z1[j] + t * (z2[j] - z1[j]);
            }
        }
    }
    let images = decoder.apply(&latents)?;
    Ok(Interpolation { latents, images })
}

/// Fréchet distance between `N(μ₁, Σ₁)` and `N(μ₂, Σ₂)`:
/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{½} Σ₂ Σ₁^{½})^{½})`.
pub fn frechet_distance(mu1: &[f64], cov1: &Matrix, mu2: &[f64], cov2: &Matrix) -> Result<f64> {
    if mu1.len() != mu2.len() || cov1.shape() != cov2.shape() || cov1.rows() != mu1.len() {
        return Err(LoraeError::dim("frechet_distance", &cov1.shape(), &cov2.shape()));
    }
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let s1 = linalg::sqrt_psd(cov1)?;
    let mut inner = s1.matmul(cov2)?.matmul(&s1)?;
    linalg::symmetrize(&mut inner);
    let cross = linalg::sym_eig_psd(&inner)?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum::<f64>();
    Ok((mean_term + cov1.trace() + cov2.trace() - 2.0 * cross).max(0.0))
}

/// Mean and top principal directions of a reference image set.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `d × k`, orthonormal columns.
    pub components: Matrix,
}

impl PcaBasis {
    pub fn fit(images: &Matrix, k: usize) -> Result<Self> {
        let cov = linalg::covariance(images)?;
        let eig = linalg::top_sym_eig(&cov, k.min(images.cols()), 300)?;
        Ok(PcaBasis {
            mean: images.column_means(),
            components: eig.eigenvectors,
        })
    }

    pub fn embed(&self, images: &Matrix) -> Result<Matrix> {
        images.sub_row_vector(&self.mean).matmul(&self.components)
    }
}

pub const DEFAULT_FEATURE_DIM: usize = 64;

/// Proxy FID with the feature basis and real-set statistics computed once.
#[derive(Debug, Clone)]
pub struct ProxyFid {
    pub basis: PcaBasis,
    real_mean: Vec<f64>,
    real_cov: Matrix,
}

impl ProxyFid {
    pub fn new(real: &Matrix, feature_dim: usize) -> Result<Self> {
        if real.rows() < feature_dim + 2 {
            return Err(LoraeError::contract(format!(
                "proxy FID with {feature_dim} features needs at least {} real images, got {}",
                feature_dim + 2,
                real.rows()
            )));
        }
        let basis = PcaBasis::fit(real, feature_dim)?;
        let feats = basis.embed(real)?;
        Ok(ProxyFid {
            real_mean: feats.column_means(),
            real_cov: linalg::covariance(&feats)?,
            basis,
        })
    }

    pub fn score(&self, generated: &Matrix) -> Result<f64> {
        let feats = self.basis.embed(generated)?;
        frechet_distance(
            &self.real_mean,
            &self.real_cov,
            &feats.column_means(),
            &linalg::covariance(&feats)?,
        )
    }
}

/// Fréchet distance between Gaussians fitted to PCA features of the two sets;
/// the basis is fitted on `real` only.
pub fn proxy_fid(real: &Matrix, generated: &Matrix, feature_dim: usize) -> Result<f64> {
    ProxyFid::new(real, feature_dim)?.score(generated)
}

/// Tile images into a binary PGM (P5) grid, row-major, `cols` tiles per row.
///
/// Pixels map `[-1, 1] → [0, 255]` via `round((v + 1)·127.5)`; unused tiles are black.
pub fn pgm_grid(images: &Matrix, height: usize, width: usize, cols: usize) -> Result<Vec<u8>> {
    if images.cols() != height * width || cols == 0 {
        return Err(LoraeError::dim("pgm_grid", &images.shape(), &[height, width]));
    }
    let count = images.rows();
    let grid_rows = count.div_ceil(cols).max(1);
    let (gw, gh) = (cols * width, grid_rows * height);
    let mut pixels = vec![0u8; gw * gh];
    for t in 0..count {
        let (tr, tc) = (t / cols, t % cols);
        let img = images.row(t);
        for y in 0..height {
            for x in 0..width {
                pixels[(tr * height + y) * gw + tc * width + x] = crate::data::unit_to_byte(img[y * width + x]);
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
