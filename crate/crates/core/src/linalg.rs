//! Dense linear algebra.
//!
//! Row-major [`Matrix`] plus the decompositions the rest of the crate needs:
//! one-sided Jacobi SVD (nuclear norm and its subgradient), cyclic Jacobi for
//! symmetric eigenproblems (latent spectra, matrix square roots), Cholesky
//! (Gaussian sampling) and the biased empirical covariance.
//!
//! Jacobi methods are used throughout because they deliver small singular
//! values and eigenvalues to high relative accuracy, and the matrices involved
//! are at most a few hundred rows.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LoraeError, Result};
use crate::rng;

/// Sweep cap for both Jacobi solvers.
pub const MAX_SWEEPS: usize = 100;

/// Singular values at or below `SV_CUTOFF * σ_max` are treated as zero by
/// [`nuclear_norm_subgradient`] and [`numerical_rank`].
pub const SV_CUTOFF: f64 = 1e-10;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(LoraeError::dim("Matrix::new", &[rows, cols], &[data.len()]));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Build from row vectors. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn i.i.d. from N(0, 1).
    pub fn random_normal(rows: usize, cols: usize, rng: &mut rng::Rng) -> Self {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, true)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, true, other, false)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(LoraeError::dim("matvec", &self.shape(), &[v.len()]));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LoraeError::dim(op, &self.shape(), &other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy of the first `k` columns.
    pub fn first_cols(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(LoraeError::dim("vstack", &[rows, cols], &p.shape()));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Mean of each column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// `self` with `v` subtracted from every row.
    pub fn sub_row_vector(&self, v: &[f64]) -> Matrix {
        let mut out = self.clone();
        for i in 0..out.rows {
            for (x, m) in out.row_mut(i).iter_mut().zip(v) {
                *x -= m;
            }
        }
        out
    }

    pub fn symmetry_defect(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = self.get(i, j) - self.get(j, i);
                s += d * d;
            }
        }
        s.sqrt()
    }
}

/// General matrix product `op(a) · op(b)` through `matrixmultiply`.
pub fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Result<Matrix> {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != k2 {
        return Err(LoraeError::dim("matmul", &a.shape(), &b.shape()));
    }
    let mut out = Matrix::zeros(m, n);
    gemm_raw(
        m,
        k,
        n,
        &a.data,
        a.cols,
        trans_a,
        &b.data,
        b.cols,
        trans_b,
        &mut out.data,
        0.0,
    );
    Ok(out)
}

/// `c ← op(a)·op(b) + beta·c` on raw row-major buffers.
///
/// `lda` / `ldb` are the row lengths of the stored (untransposed) buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    trans_a: bool,
    b: &[f64],
    ldb: usize,
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    assert!(a.len() >= if trans_a { k * lda } else { m * lda });
    assert!(b.len() >= if trans_b { n * ldb } else { k * ldb });
    // SAFETY: bounds on a, b and c are asserted above; strides describe those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows, self.u.cols, |i, j| self.u.get(i, j) * self.sigma[j]);
        us.matmul_t(&self.v).expect("svd factors are conformant")
    }
}

#[derive(Debug, Clone)]
pub struct EigSymResult {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

/// Singular value decomposition of a square matrix by one-sided (Hestenes) Jacobi.
///
/// Columns of a working copy are rotated pairwise until every pair is
/// orthogonal to working precision; a sweep with no rotation ends the iteration.
/// Columns whose norm falls below `n·ε·‖m‖_F` count as numerically zero and
/// are not rotated; their singular vectors in `U` are completed to an
/// orthonormal basis.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_square() {
        return Err(LoraeError::dim("svd", &m.shape(), &[m.cols, m.cols]));
    }
    if !m.is_finite() {
        return Err(LoraeError::contract("svd input has non-finite entries"));
    }
    let n = m.rows;
    // Row p of `w` holds column p of the working matrix.
    let mut w = m.transpose();
    // Row p of `v` holds column p of V.
    let mut v = Matrix::identity(n);
    // A length-n dot product carries ~√n·ε relative rounding noise.
    let tol = n as f64 * f64::EPSILON;
    let zero_norm = n as f64 * f64::EPSILON * m.frobenius_norm();
    let zero_sq = zero_norm * zero_norm;

    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || alpha <= zero_sq || beta <= zero_sq || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let g: f64 = w.row(p).iter().zip(w.row(q)).map(|(x, y)| x * y).sum();
                off += 2.0 * g * g;
            }
        }
        return Err(LoraeError::Numerical(format!(
            "Jacobi SVD did not converge after {MAX_SWEEPS} sweeps (off-diagonal residual {:.3e})",
            off.sqrt()
        )));
    }

    let norms: Vec<f64> = (0..n)
        .map(|p| w.row(p).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&p| norms[p]).collect();
    let mut ut = Matrix::zeros(n, n); // row j = column j of U
    let mut vt = Matrix::zeros(n, n);
    let mut filled = Vec::with_capacity(n);
    for (j, &p) in order.iter().enumerate() {
        vt.row_mut(j).copy_from_slice(v.row(p));
        if sigma[j] > zero_norm && sigma[j] > 0.0 {
            let inv = 1.0 / sigma[j];
            for (dst, src) in ut.row_mut(j).iter_mut().zip(w.row(p)) {
                *dst = src * inv;
            }
            filled.push(true);
        } else {
            filled.push(false);
        }
    }
    complete_orthonormal_rows(&mut ut, &filled);

    Ok(SvdResult {
        u: ut.transpose(),
        sigma,
        v: vt.transpose(),
    })
}

#[inline]
fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    let (head, tail) = m.data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill the rows of `basis` not marked in `filled` so that all rows are orthonormal.
fn complete_orthonormal_rows(basis: &mut Matrix, filled: &[bool]) {
    let n = basis.cols;
    let mut done: Vec<usize> = (0..basis.rows).filter(|&i| filled[i]).collect();
    let mut candidate = 0;
    for j in 0..basis.rows {
        if filled[j] {
            continue;
        }
        loop {
            assert!(candidate < n, "cannot complete orthonormal basis");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &k in &done {
                    let d: f64 = basis.row(k).iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (x, b) in e.iter_mut().zip(basis.row(k)) {
                        *x -= d * b;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (dst, x) in basis.row_mut(j).iter_mut().zip(&e) {
                    *dst = x / norm;
                }
                done.push(j);
                break;
            }
        }
    }
}

/// `‖m‖_* = Σ σᵢ(m)`.
pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.sigma.iter().sum())
}

/// Nuclear norm and the subgradient element `U_r V_rᵀ` from a single SVD.
pub fn nuclear_norm_with_subgradient(m: &Matrix) -> Result<(f64, Matrix)> {
    let dec = svd(m)?;
    let norm = dec.sigma.iter().sum();
    Ok((norm, subgradient_from_svd(&dec)))
}

/// An element of the subdifferential of `‖·‖_*` at `m`: `U_r V_rᵀ` over the
/// singular directions with `σᵢ > SV_CUTOFF · σ_max`. Zero maps to zero.
pub fn nuclear_norm_subgradient(m: &Matrix) -> Result<Matrix> {
    Ok(subgradient_from_svd(&svd(m)?))
}

fn subgradient_from_svd(dec: &SvdResult) -> Matrix {
    let n = dec.u.rows;
    let r = numerical_rank(&dec.sigma, SV_CUTOFF);
    let mut g = Matrix::zeros(n, n);
    if r == 0 {
        return g;
    }
    let ur = dec.u.first_cols(r);
    let vr = dec.v.first_cols(r);
    gemm_raw(
        n,
        r,
        n,
        ur.as_slice(),
        r,
        false,
        vr.as_slice(),
        r,
        true,
        g.as_mut_slice(),
        0.0,
    );
    g
}

/// Number of values strictly above `rel_tol · max(values)`.
pub fn numerical_rank(values: &[f64], rel_tol: f64) -> usize {
    let max = values.iter().fold(0.0_f64, |m, v| m.max(*v));
    if max <= 0.0 {
        return 0;
    }
    values.iter().filter(|&&v| v > rel_tol * max).count()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input must be symmetric to `1e-10` relative Frobenius error; it is
/// symmetrized before iterating.
pub fn sym_eig(a: &Matrix) -> Result<EigSymResult> {
    if !a.is_square() {
        return Err(LoraeError::dim("sym_eig", &a.shape(), &[a.cols, a.cols]));
    }
    if !a.is_finite() {
        return Err(LoraeError::contract("sym_eig input has non-finite entries"));
    }
    let norm = a.frobenius_norm();
    let defect = a.symmetry_defect();
    if defect > 1e-10 * norm {
        return Err(LoraeError::contract(format!(
            "sym_eig input is not symmetric: ‖A − Aᵀ‖_F = {defect:.3e}, ‖A‖_F = {norm:.3e}"
        )));
    }
    let n = a.rows;
    let mut w = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut vt = Matrix::identity(n); // row k = eigenvector k

    let off_norm = |w: &Matrix| {
        let mut s = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                s += 2.0 * w.get(p, q) * w.get(p, q);
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off = off_norm(&w);
        if off <= 1e-15 * norm || off == 0.0 {
            converged = true;
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = w.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                if apq.abs() <= f64::EPSILON * 0.5 * (app.abs() * aqq.abs()).sqrt() {
                    w.set(p, q, 0.0);
                    w.set(q, p, 0.0);
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) rotation.
                for k in 0..n {
                    let akp = w.get(k, p);
                    let akq = w.get(k, q);
                    w.set(k, p, c * akp - s * akq);
                    w.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = w.get(p, k);
                    let aqk = w.get(q, k);
                    w.set(p, k, c * apk - s * aqk);
                    w.set(q, k, s * apk + c * aqk);
                }
                w.set(p, q, 0.0);
                w.set(q, p, 0.0);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        let off = off_norm(&w);
        if off > 1e-12 * norm {
            return Err(LoraeError::Numerical(format!(
                "Jacobi eigensolver did not converge after {MAX_SWEEPS} sweeps (off-diagonal residual {off:.3e})"
            )));
        }
    }

    let diag = w.diag();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| diag[y].total_cmp(&diag[x]).then(x.cmp(&y)));
    let eigenvalues = order.iter().map(|&k| diag[k]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, j| vt.get(order[j], i));
    Ok(EigSymResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Eigendecomposition of a covariance-like matrix with eigenvalues clamped at zero.
pub fn sym_eig_psd(a: &Matrix) -> Result<EigSymResult> {
    let mut eig = sym_eig(a)?;
    for v in &mut eig.eigenvalues {
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// Principal square root of a symmetric PSD matrix (negative eigenvalues clamped to 0).
pub fn sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig_psd(a)?;
    let n = a.rows;
    let scaled = Matrix::from_fn(n, n, |i, j| eig.eigenvectors.get(i, j) * eig.eigenvalues[j].sqrt());
    let mut out = scaled.matmul_t(&eig.eigenvectors)?;
    symmetrize(&mut out);
    Ok(out)
}

pub fn symmetrize(m: &mut Matrix) {
    let n = m.rows;
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

/// Lower-triangular `L` with `L·Lᵀ = sigma` and positive diagonal.
pub fn cholesky(sigma: &Matrix) -> Result<Matrix> {
    if !sigma.is_square() {
        return Err(LoraeError::dim("cholesky", &sigma.shape(), &[sigma.cols, sigma.cols]));
    }
    let n = sigma.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = sigma.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LoraeError::Numerical(format!(
                "Cholesky: matrix is not positive definite (pivot {j} = {d:.3e})"
            )));
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = sigma.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Biased empirical covariance `(1/n) Σ (zᵢ − z̄)(zᵢ − z̄)ᵀ` of the rows of `samples`.
pub fn covariance(samples: &Matrix) -> Result<Matrix> {
    if samples.rows < 2 {
        return Err(LoraeError::contract(format!(
            "covariance needs at least 2 samples, got {}",
            samples.rows
        )));
    }
    let mean = samples.column_means();
    let centered = samples.sub_row_vector(&mean);
    let mut cov = centered.t_matmul(&centered)?.scale(1.0 / samples.rows as f64);
    symmetrize(&mut cov);
    Ok(cov)
}

/// Leading `k` eigenpairs of a symmetric PSD matrix by block subspace
/// iteration followed by a Rayleigh-Ritz projection.
///
/// Used where the full Jacobi solve is too expensive (PCA on raw pixels).
/// The starting block is drawn from a fixed seed, so results are reproducible.
pub fn top_sym_eig(a: &Matrix, k: usize, max_iter: usize) -> Result<EigSymResult> {
    if !a.is_square() {
        return Err(LoraeError::dim("top_sym_eig", &a.shape(), &[a.cols, a.cols]));
    }
    let n = a.rows;
    if k == 0 || k > n {
        return Err(LoraeError::contract(format!("top_sym_eig: k = {k} outside 1..={n}")));
    }
    let block = (k + 8).min(n);
    if block == n {
        let full = sym_eig(a)?;
        return Ok(EigSymResult {
            eigenvalues: full.eigenvalues[..k].to_vec(),
            eigenvectors: full.eigenvectors.first_cols(k),
        });
    }
    let mut rng = rng::seeded(0x5_eed0_f9ca);
    // Columns of q span the current subspace; stored transposed (block × n).
    let mut qt = Matrix::random_normal(block, n, &mut rng);
    orthonormalize_rows(&mut qt);
    let mut prev: Option<Vec<f64>> = None;
    for it in 0..max_iter {
        // (A Q)ᵀ = Qᵀ A since A is symmetric.
        qt = qt.matmul(a)?;
        orthonormalize_rows(&mut qt);
        if it % 5 == 4 || it + 1 == max_iter {
            let ritz = rayleigh_ritz_values(a, &qt)?;
            if let Some(p) = &prev {
                let change = ritz[..k]
                    .iter()
                    .zip(&p[..k])
                    .map(|(x, y)| (x - y).abs() / x.abs().max(1e-300))
                    .fold(0.0, f64::max);
                if change < 1e-12 {
                    break;
                }
            }
            prev = Some(ritz);
        }
    }
    let aq = qt.matmul(a)?; // block × n = Qᵀ A
    let mut small = aq.matmul_t(&qt)?; // Qᵀ A Q
    symmetrize(&mut small);
    let eig = sym_eig(&small)?;
    // Ritz vectors: Q · Y
    let vecs = qt.t_matmul(&eig.eigenvectors)?; // n × block
    Ok(EigSymResult {
        eigenvalues: eig.eigenvalues[..k].to_vec(),
        eigenvectors: vecs.first_cols(k),
    })
}

fn rayleigh_ritz_values(a: &Matrix, qt: &Matrix) -> Result<Vec<f64>> {
    let mut small = qt.matmul(a)?.matmul_t(qt)?;
    symmetrize(&mut small);
    Ok(sym_eig(&small)?.eigenvalues)
}

/// Modified Gram-Schmidt on the rows, applied twice.
fn orthonormalize_rows(m: &mut Matrix) {
    let cols = m.cols;
    for _ in 0..2 {
        for i in 0..m.rows {
            for j in 0..i {
                let d: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                let (head, tail) = m.data.split_at_mut(i * cols);
                let rj = &head[j * cols..(j + 1) * cols];
                for (x, y) in tail[..cols].iter_mut().zip(rj) {
                    *x -= d * y;
                }
            }
            let norm = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                m.row_mut(i).iter_mut().for_each(|x| *x /= norm);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_svd() {
        let d = svd(&Matrix::identity(3)).unwrap();
        assert!(close(&d.sigma, &[1.0, 1.0, 1.0], 1e-15));
    }

    #[test]
    fn diag_with_negative_entry() {
        let m = Matrix::from_diag(&[3.0, -2.0]);
        let d = svd(&m).unwrap();
        assert!(close(&d.sigma, &[3.0, 2.0], 1e-15));
        assert!(d.reconstruct().sub(&m).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn svd_rejects_rectangular() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(svd(&m), Err(LoraeError::Dimension { .. })));
    }

    #[test]
    fn svd_of_zero_matrix_has_orthogonal_factors() {
        let d = svd(&Matrix::zeros(4, 4)).unwrap();
        assert!(d.sigma.iter().all(|&s| s == 0.0));
        let utu = d.u.t_matmul(&d.u).unwrap();
        assert!(utu.sub(&Matrix::identity(4)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn nuclear_norm_of_diagonals() {
        assert!((nuclear_norm(&Matrix::identity(3)).unwrap() - 3.0).abs() < 1e-15);
        assert!((nuclear_norm(&Matrix::from_diag(&[1.0, 2.0, 3.0])).unwrap() - 6.0).abs() < 1e-14);
    }

    #[test]
    fn subgradient_of_pd_symmetric_is_identity() {
        let mut rng = rng::seeded(3);
        let a = Matrix::random_normal(5, 5, &mut rng);
        let spd = a.matmul_t(&a).unwrap().add(&Matrix::identity(5)).unwrap();
        let g = nuclear_norm_subgradient(&spd).unwrap();
        assert!(g.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn subgradient_of_zero_is_zero() {
        let g = nuclear_norm_subgradient(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(g, Matrix::zeros(3, 3));
    }

    #[test]
    fn sym_eig_diag() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 5.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![5.0, 3.0, 1.0]);
        // permuted identity
        let expect = Matrix::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(e.eigenvectors.map(f64::abs), expect);
    }

    #[test]
    fn sym_eig_rank_one() {
        let v = [2.0 / 3.0_f64.sqrt(); 3]; // ‖v‖ = 2
        let a = Matrix::from_fn(3, 3, |i, j| v[i] * v[j]);
        let e = sym_eig(&a).unwrap();
        assert!(close(&e.eigenvalues, &[4.0, 0.0, 0.0], 1e-14));
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(LoraeError::Contract(_))));
    }

    #[test]
    fn cholesky_hand_example() {
        let l = cholesky(&Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]])).unwrap();
        let expect = Matrix::from_rows(&[[2.0, 0.0], [1.0, 2.0_f64.sqrt()]]);
        assert!(l.sub(&expect).unwrap().max_abs() < 1e-15);
        assert_eq!(cholesky(&Matrix::identity(4)).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let err = cholesky(&Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]])).unwrap_err();
        assert!(err.to_string().contains("pivot 1"), "{err}");
    }

    #[test]
    fn covariance_small_cases() {
        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert_eq!(covariance(&same).unwrap(), Matrix::zeros(2, 2));
        let c = covariance(&Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]])).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));
        assert!(covariance(&Matrix::from_rows(&[[1.0, 0.0]])).is_err());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn top_sym_eig_matches_full_solve() {
        let mut rng = rng::seeded(11);
        let a = Matrix::random_normal(40, 30, &mut rng);
        let c = covariance(&a).unwrap();
        let full = sym_eig(&c).unwrap();
        let top = top_sym_eig(&c, 5, 500).unwrap();
        for i in 0..5 {
            assert!((full.eigenvalues[i] - top.eigenvalues[i]).abs() < 1e-9 * full.eigenvalues[0]);
        }
    }
}
