mod common;

use common::{naive_matmul, orthogonal, rng, uniform};
use lorae::linalg::{cholesky, covariance, nuclear_norm, nuclear_norm_subgradient, svd, sym_eig, top_sym_eig, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn orthonormality_defect(q: &Matrix) -> f64 {
    max_abs_diff(&naive_matmul(&q.transpose(), q), &Matrix::identity(q.cols()))
}

/// `Q₁ · diag(s) · Q₂ᵀ` with known singular values.
fn with_spectrum(s: &[f64], seed: u64) -> Matrix {
    let n = s.len();
    let q1 = orthogonal(n, seed);
    let q2 = orthogonal(n, seed + 1);
    let scaled = Matrix::from_fn(n, n, |i, j| q1.get(i, j) * s[j]);
    naive_matmul(&scaled, &q2.transpose())
}

fn descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn svd_recovers_planted_spectrum() {
    for (k, n) in [1usize, 2, 5, 16, 33, 64].into_iter().enumerate() {
        let mut r = rng(100 + k as u64);
        let s = descending((0..n).map(|_| r.random_range(0.01..10.0)).collect());
        let m = with_spectrum(&s, 200 + k as u64);
        let dec = svd(&m).unwrap();
        for (got, want) in dec.sigma.iter().zip(&s) {
            assert!((got - want).abs() <= 1e-10 * s[0], "n={n}: {got} vs {want}");
        }
        assert!(max_abs_diff(&dec.reconstruct(), &m) <= 1e-10 * m.frobenius_norm());
        assert!(orthonormality_defect(&dec.u) <= 1e-10);
        assert!(orthonormality_defect(&dec.v) <= 1e-10);
    }
}

#[test]
fn svd_squares_match_gram_eigenvalues() {
    let m = uniform(12, 12, 3);
    let dec = svd(&m).unwrap();
    let gram = naive_matmul(&m.transpose(), &m);
    let eig = sym_eig(&gram).unwrap();
    for (s, l) in dec.sigma.iter().zip(&eig.eigenvalues) {
        assert!((s * s - l).abs() <= 1e-7 * eig.eigenvalues[0]);
    }
}

#[test]
fn svd_of_rank_deficient_matrix() {
    let s = [3.0, 2.0, 1.0, 0.0, 0.0, 0.0];
    let m = with_spectrum(&s, 7);
    let dec = svd(&m).unwrap();
    for (got, want) in dec.sigma.iter().zip(&s) {
        assert!((got - want).abs() <= 1e-12 * 3.0);
    }
    assert!(orthonormality_defect(&dec.u) <= 1e-10);
    assert!(orthonormality_defect(&dec.v) <= 1e-10);
    assert!(max_abs_diff(&dec.reconstruct(), &m) <= 1e-12);
}

#[test]
fn svd_of_zero_and_identity() {
    let dec = svd(&Matrix::zeros(4, 4)).unwrap();
    assert!(dec.sigma.iter().all(|&s| s == 0.0));
    assert!(orthonormality_defect(&dec.u) <= 1e-12);
    assert_eq!(nuclear_norm(&Matrix::identity(9)).unwrap(), 9.0);
    assert!(svd(&Matrix::zeros(2, 3)).is_err());
}

#[test]
fn nuclear_norm_of_diagonal() {
    let m = Matrix::from_diag(&[3.0, -2.0, 0.5]);
    assert!((nuclear_norm(&m).unwrap() - 5.5).abs() < 1e-14);
}

#[test]
fn nuclear_norm_equals_trace_of_gram_root() {
    let m = uniform(10, 10, 21);
    let gram = naive_matmul(&m.transpose(), &m);
    let eig = sym_eig(&gram).unwrap();
    let trace_root: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    assert!((nuclear_norm(&m).unwrap() - trace_root).abs() <= 1e-8 * trace_root);
}

#[test]
fn subgradient_matches_directional_derivative() {
    // Away from ties and zeros the nuclear norm is differentiable.
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let s = descending((0..8).map(|_| r.random_range(0.5..4.0)).collect());
        let m = with_spectrum(&s, 400 + seed);
        let d = uniform(8, 8, 500 + seed);
        let h = 1e-6;
        let fd = (nuclear_norm(&m.add(&d.scale(h)).unwrap()).unwrap()
            - nuclear_norm(&m.sub(&d.scale(h)).unwrap()).unwrap())
            / (2.0 * h);
        let g = nuclear_norm_subgradient(&m).unwrap();
        let inner: f64 = g.as_slice().iter().zip(d.as_slice()).map(|(a, b)| a * b).sum();
        assert!(
            (fd - inner).abs() <= 1e-4 * inner.abs().max(1.0),
            "seed {seed}: {fd} vs {inner}"
        );
    }
}

#[test]
fn subgradient_norm_bounds() {
    let m = with_spectrum(&[2.0, 1.0, 0.0, 0.0], 9);
    let g = nuclear_norm_subgradient(&m).unwrap();
    // U_r V_rᵀ has spectral norm 1 and Frobenius norm √r.
    assert!((g.frobenius_norm() - 2f64.sqrt()).abs() < 1e-10);
    let inner: f64 = g.as_slice().iter().zip(m.as_slice()).map(|(a, b)| a * b).sum();
    assert!((inner - 3.0).abs() < 1e-10);
    assert_eq!(
        nuclear_norm_subgradient(&Matrix::zeros(3, 3)).unwrap(),
        Matrix::zeros(3, 3)
    );
}

#[test]
fn symmetric_eigen_residual() {
    let a = uniform(15, 15, 31);
    let s = a.add(&a.transpose()).unwrap();
    let eig = sym_eig(&s).unwrap();
    let v = &eig.eigenvectors;
    assert!(orthonormality_defect(v) <= 1e-10);
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let col = v.col(j);
        let av = s.matvec(&col).unwrap();
        let res: f64 = av
            .iter()
            .zip(&col)
            .map(|(x, y)| (x - l * y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(res <= 1e-10 * s.frobenius_norm());
    }
    assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn top_eigenpairs_agree_with_full_solve() {
    let x = uniform(80, 20, 41);
    let c = covariance(&x).unwrap();
    let full = sym_eig(&c).unwrap();
    let top = top_sym_eig(&c, 5, 500).unwrap();
    for (a, b) in top.eigenvalues.iter().zip(&full.eigenvalues) {
        assert!((a - b).abs() <= 1e-8 * full.eigenvalues[0]);
    }
}

#[test]
fn cholesky_of_random_pd() {
    for seed in 0..5 {
        let a = uniform(12, 12, 50 + seed);
        let pd = naive_matmul(&a, &a.transpose())
            .add(&Matrix::identity(12).scale(0.1))
            .unwrap();
        let l = cholesky(&pd).unwrap();
        for i in 0..12 {
            assert!(l.get(i, i) > 0.0);
            for j in i + 1..12 {
                assert_eq!(l.get(i, j), 0.0);
            }
        }
        let back = naive_matmul(&l, &l.transpose());
        assert!(max_abs_diff(&back, &pd) <= 1e-10 * pd.max_abs());
    }
    let indefinite = Matrix::from_diag(&[1.0, -1.0]);
    assert!(cholesky(&indefinite).is_err());
}

#[test]
fn covariance_matches_hand_computation() {
    let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0], [5.0, 10.0]]);
    let c = covariance(&x).unwrap();
    // biased: var(1,3,5) = 8/3, var(2,6,10) = 32/3, cov = 16/3
    assert!((c.get(0, 0) - 8.0 / 3.0).abs() < 1e-14);
    assert!((c.get(1, 1) - 32.0 / 3.0).abs() < 1e-13);
    assert!((c.get(0, 1) - 16.0 / 3.0).abs() < 1e-14);
    assert_eq!(c.get(0, 1), c.get(1, 0));
}

#[test]
fn covariance_monte_carlo() {
    let mut r = rng(61);
    let n = 40_000;
    // z = (g1, g1 + 2 g2): covariance [[1, 1], [1, 5]]
    let mut x = Matrix::zeros(n, 2);
    for i in 0..n {
        let g1: f64 = r.sample(rand_distr::StandardNormal);
        let g2: f64 = r.sample(rand_distr::StandardNormal);
        x.set(i, 0, g1);
        x.set(i, 1, g1 + 2.0 * g2);
    }
    let c = covariance(&x).unwrap();
    let want = Matrix::from_rows(&[[1.0, 1.0], [1.0, 5.0]]);
    assert!(max_abs_diff(&c, &want) < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn norm_ordering(seed in 0u64..100_000, n in 1usize..12) {
        let m = uniform(n, n, seed);
        let dec = svd(&m).unwrap();
        let nuc: f64 = dec.sigma.iter().sum();
        let fro = m.frobenius_norm();
        let spec = dec.sigma[0];
        prop_assert!(spec <= fro * (1.0 + 1e-12));
        prop_assert!(fro <= nuc * (1.0 + 1e-12));
        prop_assert!(nuc <= (n as f64).sqrt() * fro * (1.0 + 1e-12));
        let sq: f64 = dec.sigma.iter().map(|s| s * s).sum();
        prop_assert!((sq - fro * fro).abs() <= 1e-10 * fro * fro);
    }

    #[test]
    fn unitary_invariance(seed in 0u64..100_000, n in 2usize..10) {
        let m = uniform(n, n, seed);
        let u = orthogonal(n, seed + 1);
        let v = orthogonal(n, seed + 2);
        let rotated = naive_matmul(&naive_matmul(&u, &m), &v.transpose());
        let a = nuclear_norm(&m).unwrap();
        let b = nuclear_norm(&rotated).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn triangle_inequality_and_homogeneity(seed in 0u64..100_000, c in -5.0f64..5.0) {
        let a = uniform(6, 6, seed);
        let b = uniform(6, 6, seed + 9);
        let na = nuclear_norm(&a).unwrap();
        let nb = nuclear_norm(&b).unwrap();
        prop_assert!(nuclear_norm(&a.add(&b).unwrap()).unwrap() <= (na + nb) * (1.0 + 1e-12));
        let scaled = nuclear_norm(&a.scale(c)).unwrap();
        prop_assert!((scaled - c.abs() * na).abs() <= 1e-10 * na.max(1.0));
    }

    #[test]
    fn covariance_is_psd(seed in 0u64..100_000, n in 3usize..30, d in 1usize..8) {
        let x = uniform(n, d, seed);
        let c = covariance(&x).unwrap();
        prop_assert_eq!(c.symmetry_defect(), 0.0);
        let eig = sym_eig(&c).unwrap();
        let top = eig.eigenvalues[0].max(1e-300);
        prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10 * top));
    }
}
