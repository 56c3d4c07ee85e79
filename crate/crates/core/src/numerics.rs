//! Small dense linear algebra and probability primitives.
//!
//! Everything here operates on `ndarray` views and is sized for the
//! low-dimensional objects the rest of the crate needs: readout matrices with a
//! handful of rows, return-map Jacobians, covariance matrices of latent
//! differences. None of it is meant to compete with LAPACK.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};

/// Singular values below `PINV_RCOND * sigma_max` are treated as zero.
pub const PINV_RCOND: f64 = 1e-10;

/// Norm below which a vector is considered to have no direction.
pub const COSINE_NORM_GUARD: f64 = 1e-12;

/// Lower clamp applied to reference probabilities inside [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

/// A probability vector. Entries are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution(Vec<f64>);

impl DiscreteDistribution {
    /// Wraps `probs` after checking non-negativity and normalization (1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LvrError::invalid_input("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LvrError::invalid_input("distribution has negative or non-finite entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(LvrError::invalid_input(format!("distribution sums to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn ensure_finite(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LvrError::invalid_input(format!("{what} has non-finite entries")))
    }
}

fn is_symmetric(m: &ArrayView2<f64>) -> bool {
    let (r, c) = m.dim();
    if r != c {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for i in 0..r {
        for j in (i + 1)..c {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-14 * scale {
                return false;
            }
        }
    }
    true
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as the columns of the second array.
pub fn symmetric_eigen(m: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (n, c) = m.dim();
    if n != c {
        return Err(LvrError::invalid_input(format!("symmetric_eigen needs a square matrix, got {n}x{c}")));
    }
    ensure_finite(&m, "matrix")?;
    let mut a = m.to_owned();
    // Symmetrize so roundoff in the caller does not leak into the rotations.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = avg;
            a[[j, i]] = avg;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let total_norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * total_norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = cs * akp - sn * akq;
                    a[[k, q]] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = cs * apk - sn * aqk;
                    a[[q, k]] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = cs * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + cs * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((values, vectors))
}

/// Thin singular value decomposition by one-sided (Hestenes) Jacobi.
///
/// Returns `(u, sigma, v)` with `a = u * diag(sigma) * v^T`, `u` of shape
/// `m x n`, `v` of shape `n x n`. Columns of `u` belonging to zero singular
/// values are left as zero vectors.
pub fn jacobi_svd(a: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    ensure_finite(&a, "matrix")?;
    let (_, n) = a.dim();
    let mut u = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = u.column(p).dot(&u.column(p));
                let beta = u.column(q).dot(&u.column(q));
                let gamma = u.column(p).dot(&u.column(q));
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for mat in [&mut u, &mut v] {
                    for k in 0..mat.nrows() {
                        let xp = mat[[k, p]];
                        let xq = mat[[k, q]];
                        mat[[k, p]] = cs * xp - sn * xq;
                        mat[[k, q]] = sn * xp + cs * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = Array1::zeros(n);
    for j in 0..n {
        let norm = u.column(j).dot(&u.column(j)).sqrt();
        sigma[j] = norm;
        if norm > 0.0 {
            u.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
    Ok((u, sigma, v))
}

/// Moore-Penrose pseudo-inverse.
///
/// Symmetric inputs (the `W W^T` case) go through [`symmetric_eigen`]; other
/// shapes use [`jacobi_svd`]. Rank is decided by the cutoff
/// `PINV_RCOND * sigma_max`.
pub fn pseudo_inverse(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure_finite(&m, "pseudo_inverse input")?;
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Ok(Array2::zeros((cols, rows)));
    }
    if is_symmetric(&m) {
        let (values, vectors) = symmetric_eigen(m)?;
        let smax = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let cutoff = PINV_RCOND * smax;
        let mut out = Array2::zeros((rows, rows));
        for (k, &lam) in values.iter().enumerate() {
            if lam.abs() > cutoff && lam != 0.0 {
                let col = vectors.column(k);
                for i in 0..rows {
                    for j in 0..rows {
                        out[[i, j]] += col[i] * col[j] / lam;
                    }
                }
            }
        }
        return Ok(out);
    }
    let (u, sigma, v) = jacobi_svd(m)?;
    let smax = sigma.iter().fold(0.0f64, |acc, s| acc.max(*s));
    let cutoff = PINV_RCOND * smax;
    let mut out = Array2::zeros((cols, rows));
    for k in 0..cols {
        let s = sigma[k];
        if s > cutoff && s > 0.0 {
            let vk = v.column(k);
            let uk = u.column(k);
            for i in 0..cols {
                for j in 0..rows {
                    out[[i, j]] += vk[i] * uk[j] / s;
                }
            }
        }
    }
    Ok(out)
}

/// Orthogonal projector `W^T (W W^T)^+ W` onto the row space of `w`.
pub fn row_space_projection(w: ArrayView2<f64>) -> Result<Array2<f64>> {
    let gram = w.dot(&w.t());
    let gram_pinv = pseudo_inverse(gram.view())?;
    let p = w.t().dot(&gram_pinv).dot(&w);
    // Exact symmetry so downstream code can treat P as self-adjoint.
    Ok((&p + &p.t()) * 0.5)
}

/// Cosine similarity, or 0 when either vector has norm below
/// [`COSINE_NORM_GUARD`].
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < COSINE_NORM_GUARD || nb < COSINE_NORM_GUARD {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Temperature softmax with max-subtraction.
pub fn softmax(scores: &[f64], tau: f64) -> Result<DiscreteDistribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(LvrError::invalid_parameter(format!("softmax temperature must be > 0, got {tau}")));
    }
    if scores.is_empty() {
        return Err(LvrError::invalid_input("softmax of an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LvrError::invalid_input("softmax scores must be finite"));
    }
    Ok(DiscreteDistribution(softmax_unchecked(scores, tau)))
}

/// Softmax without argument validation; callers guarantee `tau > 0`.
pub(crate) fn softmax_unchecked(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` with `q` clamped below at [`KL_FLOOR`].
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LvrError::invalid_input(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_unchecked(p.probs(), q.probs()))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    kl.max(0.0)
}

/// Principal axes of a sample cloud.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca {
    /// `k x dim`, one unit component per row, ordered by explained variance.
    pub components: Array2<f64>,
    /// Eigenvalues of the sample covariance for the returned components.
    pub explained_variance: Array1<f64>,
    /// Sum of all covariance eigenvalues (the trace).
    pub total_variance: f64,
    pub mean: Array1<f64>,
}

impl Pca {
    /// Fraction of total variance per component; all zeros for degenerate data.
    pub fn variance_ratios(&self) -> Array1<f64> {
        if self.total_variance <= 0.0 {
            return Array1::zeros(self.explained_variance.len());
        }
        self.explained_variance.mapv(|v| v.max(0.0) / self.total_variance)
    }
}

/// PCA of `samples` (one row per sample) via the covariance eigenproblem.
pub fn pca(samples: ArrayView2<f64>, k: usize) -> Result<Pca> {
    let (n, dim) = samples.dim();
    if n < 2 {
        return Err(LvrError::invalid_input(format!("pca needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > dim {
        return Err(LvrError::invalid_parameter(format!("pca k={k} must be in 1..={dim}")));
    }
    ensure_finite(&samples, "pca samples")?;
    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &samples - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (values, vectors) = symmetric_eigen(cov.view())?;
    let total_variance = values.iter().map(|v| v.max(0.0)).sum();
    let components = vectors.slice(ndarray::s![.., ..k]).t().to_owned();
    let explained_variance = values.slice(ndarray::s![..k]).mapv(|v| v.max(0.0));
    Ok(Pca {
        components,
        explained_variance,
        total_variance,
        mean,
    })
}

/// Eigenvalue magnitudes of a small square matrix, sorted descending.
pub fn eigenvalue_magnitudes(m: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (r, c) = m.dim();
    if r != c {
        return Err(LvrError::invalid_input(format!("eigenvalues need a square matrix, got {r}x{c}")));
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    if r > 8 {
        return Err(LvrError::invalid_input(format!("eigenvalue routine is limited to 8x8, got {r}x{r}")));
    }
    ensure_finite(&m, "matrix")?;
    let mut mags = if r == 1 {
        vec![m[[0, 0]].abs()]
    } else if r == 2 {
        eig2_magnitudes(m[[0, 0]], m[[0, 1]], m[[1, 0]], m[[1, 1]])
    } else {
        let dm = nalgebra::DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
        let schur = nalgebra::linalg::Schur::try_new(dm, f64::EPSILON, 10_000)
            .ok_or_else(|| LvrError::numerical("real Schur reduction did not converge"))?;
        schur.complex_eigenvalues().iter().map(|z| z.norm()).collect()
    };
    mags.sort_by(|a, b| b.total_cmp(a));
    Ok(mags)
}

fn eig2_magnitudes(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let tr = a + d;
    let det = a * d - b * c;
    let disc = 0.25 * tr * tr - det;
    if disc >= 0.0 {
        let root = disc.sqrt();
        // Stable quadratic roots.
        let big = 0.5 * tr + root.copysign(tr);
        let small = if big != 0.0 { det / big } else { 0.5 * tr - root.copysign(tr) };
        vec![big.abs(), small.abs()]
    } else {
        let modulus = det.max(0.0).sqrt();
        vec![modulus, modulus]
    }
}

/// Largest eigenvalue magnitude of a square matrix of dimension at most 8.
pub fn spectral_radius(m: ArrayView2<f64>) -> Result<f64> {
    Ok(eigenvalue_magnitudes(m)?.first().copied().unwrap_or(0.0))
}

/// Largest singular value (spectral norm).
pub fn operator_norm(m: ArrayView2<f64>) -> Result<f64> {
    let gram = m.t().dot(&m);
    let (values, _) = symmetric_eigen(gram.view())?;
    Ok(values.first().copied().unwrap_or(0.0).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn frob(m: &Array2<f64>) -> f64 {
        m.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Gauss-Jordan inverse with partial pivoting; test oracle only.
    fn gauss_jordan_inverse(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut aug = Array2::zeros((n, 2 * n));
        aug.slice_mut(ndarray::s![.., ..n]).assign(a);
        for i in 0..n {
            aug[[i, n + i]] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| aug[[i, col]].abs().total_cmp(&aug[[j, col]].abs())).unwrap();
            for k in 0..2 * n {
                aug.swap([col, k], [piv, k]);
            }
            let d = aug[[col, col]];
            for k in 0..2 * n {
                aug[[col, k]] /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[[r, col]];
                    for k in 0..2 * n {
                        aug[[r, k]] -= f * aug[[col, k]];
                    }
                }
            }
        }
        aug.slice(ndarray::s![.., n..]).to_owned()
    }

    fn check_penrose(a: &Array2<f64>, tol: f64) {
        let x = pseudo_inverse(a.view()).unwrap();
        let axa = a.dot(&x).dot(a);
        let xax = x.dot(a).dot(&x);
        let ax = a.dot(&x);
        let xa = x.dot(a);
        let na = frob(a).max(1e-300);
        let nx = frob(&x).max(1e-300);
        assert!(frob(&(&axa - a)) / na < tol, "A X A != A");
        assert!(frob(&(&xax - &x)) / nx < tol, "X A X != X");
        assert!(frob(&(&ax - &ax.t())) / frob(&ax).max(1e-300) < tol, "AX not symmetric");
        assert!(frob(&(&xa - &xa.t())) / frob(&xa).max(1e-300) < tol, "XA not symmetric");
    }

    #[test]
    fn pinv_identity_and_rank_deficient_diag() {
        let i3 = Array2::<f64>::eye(3);
        assert_abs_diff_eq!(pseudo_inverse(i3.view()).unwrap(), i3, epsilon = 1e-14);
        let d = array![[2.0, 0.0], [0.0, 0.0]];
        let expected = array![[0.5, 0.0], [0.0, 0.0]];
        assert_abs_diff_eq!(pseudo_inverse(d.view()).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn pinv_of_spd_matches_gauss_jordan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let b = random_matrix(&mut rng, 4, 4);
            let a = b.dot(&b.t()) + Array2::<f64>::eye(4) * 0.5;
            let oracle = gauss_jordan_inverse(&a);
            let x = pseudo_inverse(a.view()).unwrap();
            assert!(frob(&(&x - &oracle)) / frob(&oracle) < 1e-10);
            let axa = a.dot(&x).dot(&a);
            assert!(frob(&(&axa - &a)) / frob(&a) < 1e-8);
        }
    }

    #[test]
    fn pinv_penrose_identities_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (r, c) in [(3, 5), (5, 3), (4, 4), (1, 6), (6, 1), (2, 2)] {
            for _ in 0..10 {
                check_penrose(&random_matrix(&mut rng, r, c), 1e-8);
            }
        }
        // Rank deficient: outer product of thin factors.
        for _ in 0..10 {
            let l = random_matrix(&mut rng, 5, 2);
            let r = random_matrix(&mut rng, 2, 4);
            check_penrose(&l.dot(&r), 1e-8);
            let s = l.dot(&l.t());
            check_penrose(&s, 1e-8);
        }
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let m = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(matches!(pseudo_inverse(m.view()), Err(LvrError::InvalidInput(_))));
    }

    #[test]
    fn projection_examples() {
        let w = array![[1.0, 0.0]];
        let p = row_space_projection(w.view()).unwrap();
        assert_abs_diff_eq!(p, array![[1.0, 0.0], [0.0, 0.0]], epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sq = random_matrix(&mut rng, 3, 3) + Array2::<f64>::eye(3) * 2.0;
        let p = row_space_projection(sq.view()).unwrap();
        assert_abs_diff_eq!(p, Array2::<f64>::eye(3), epsilon = 1e-10);
    }

    #[test]
    fn projection_idempotent_symmetric_all_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut shapes: Vec<Array2<f64>> = Vec::new();
        for (r, c) in [(1, 8), (2, 8), (3, 5), (5, 3), (4, 4), (2, 32)] {
            shapes.push(random_matrix(&mut rng, r, c));
        }
        let l = random_matrix(&mut rng, 4, 1);
        shapes.push(l.dot(&random_matrix(&mut rng, 1, 6)));
        for w in shapes {
            let p = row_space_projection(w.view()).unwrap();
            let pp = p.dot(&p);
            for (a, b) in pp.iter().zip(p.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    assert!((p[[i, j]] - p[[j, i]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cosine_examples() {
        let v = array![0.3, -2.0, 1.5];
        assert_abs_diff_eq!(cosine_similarity(v.view(), v.view()), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 0.0);
        let c = cosine_similarity(array![1.0, 1.0].view(), array![1.0, 0.0].view());
        assert_abs_diff_eq!(c, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-6);
        assert_eq!(cosine_similarity(array![0.0, 0.0].view(), array![1.0, 0.0].view()), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.3, 0.3, 0.3], 0.7).unwrap();
        for v in p.probs() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[1.0, 0.0], 0.1).unwrap();
        let hi = 1.0 / (1.0 + (-10.0f64).exp());
        assert_abs_diff_eq!(p.probs()[0], 0.999_954_6, epsilon = 1e-6);
        assert_abs_diff_eq!(p.probs()[0], hi, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probs()[1], 1.0 - hi, epsilon = 1e-15);
        assert!(matches!(softmax(&[1.0], 0.0), Err(LvrError::InvalidParameter(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(LvrError::InvalidParameter(_))));
    }

    #[test]
    fn kl_examples() {
        let p = DiscreteDistribution::new(vec![0.75, 0.25]).unwrap();
        let q = DiscreteDistribution::new(vec![0.5, 0.5]).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), 0.1308, epsilon = 1e-4);
        let p = DiscreteDistribution::new(vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), 2f64.ln(), epsilon = 1e-9);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        let r = DiscreteDistribution::uniform(3);
        assert!(matches!(kl_divergence(&p, &r), Err(LvrError::InvalidInput(_))));
    }

    #[test]
    fn pca_line_and_orthonormality() {
        let dir = array![0.6, 0.8];
        let samples = Array2::from_shape_fn((20, 2), |(i, j)| (i as f64 - 7.0) * dir[j] + 1.0);
        let pca = pca(samples.view(), 2).unwrap();
        let pc1 = pca.components.row(0);
        assert_abs_diff_eq!(pc1.dot(&dir).abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pca.explained_variance[1], 0.0, epsilon = 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_matrix(&mut rng, 50, 5);
        let pca = pca_checked(&cloud, 5);
        let gram = pca.components.dot(&pca.components.t());
        assert_abs_diff_eq!(gram, Array2::<f64>::eye(5), epsilon = 1e-9);
        for w in pca.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    fn pca_checked(x: &Array2<f64>, k: usize) -> Pca {
        pca(x.view(), k).unwrap()
    }

    #[test]
    fn pca_isotropic_gaussian() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_fn((10_000, 3), |_| StandardNormal.sample(&mut rng));
        let pca = pca_checked(&x, 3);
        let ev = &pca.explained_variance;
        assert!(ev[0] / ev[2] < 1.2, "variances {ev:?}");
        for v in ev {
            assert!((v - 1.0).abs() < 0.2);
        }
    }

    #[test]
    fn pca_errors() {
        let one = Array2::<f64>::zeros((1, 3));
        assert!(matches!(pca(one.view(), 1), Err(LvrError::InvalidInput(_))));
        let two = Array2::<f64>::zeros((4, 3));
        assert!(pca(two.view(), 4).is_err());
    }

    #[test]
    fn spectral_radius_examples() {
        let d = array![[0.5, 0.0], [0.0, -0.9]];
        assert_abs_diff_eq!(spectral_radius(d.view()).unwrap(), 0.9, epsilon = 1e-15);
        let th = 0.7f64;
        let rot = array![[th.cos(), -th.sin()], [th.sin(), th.cos()]] * 0.8;
        assert_abs_diff_eq!(spectral_radius(rot.view()).unwrap(), 0.8, epsilon = 1e-9);
        let eye = Array2::<f64>::eye(5);
        assert_abs_diff_eq!(spectral_radius(eye.view()).unwrap(), 1.0, epsilon = 1e-12);
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(matches!(spectral_radius(rect.view()), Err(LvrError::InvalidInput(_))));
    }

    #[test]
    fn spectral_radius_block_rotation_in_higher_dim() {
        // 4x4 similarity transform of blockdiag(0.8 R(theta), diag(0.3, -0.5)).
        let th = 1.1f64;
        let mut core = Array2::<f64>::zeros((4, 4));
        core[[0, 0]] = 0.8 * th.cos();
        core[[0, 1]] = -0.8 * th.sin();
        core[[1, 0]] = 0.8 * th.sin();
        core[[1, 1]] = 0.8 * th.cos();
        core[[2, 2]] = 0.3;
        core[[3, 3]] = -0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_matrix(&mut rng, 4, 4) + Array2::<f64>::eye(4) * 3.0;
        let sinv = gauss_jordan_inverse(&s);
        let m = s.dot(&core).dot(&sinv);
        let mags = eigenvalue_magnitudes(m.view()).unwrap();
        assert_abs_diff_eq!(mags[0], 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(mags[1], 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(mags[2], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(mags[3], 0.3, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            scores in prop::collection::vec(-5.0f64..5.0, 1..12),
            shift in -50.0f64..50.0,
            tau in 0.05f64..3.0,
        ) {
            let p = softmax(&scores, tau).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax(&shifted, tau).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_non_negative(
            raw in prop::collection::vec((0.0f64..1.0, 0.001f64..1.0), 1..10),
        ) {
            let sp: f64 = raw.iter().map(|r| r.0).sum::<f64>() + 1e-9;
            let sq: f64 = raw.iter().map(|r| r.1).sum();
            let p: Vec<f64> = raw.iter().map(|r| (r.0 + 1e-9 / raw.len() as f64) / sp).collect();
            let q: Vec<f64> = raw.iter().map(|r| r.1 / sq).collect();
            let kl = kl_unchecked(&p, &q);
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_unchecked(&p, &p) < 1e-12);
        }

        #[test]
        fn spectral_radius_matches_characteristic_polynomial(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0,
        ) {
            let m = array![[a, b], [c, d]];
            let tr = a + d;
            let det = a * d - b * c;
            let disc = tr * tr - 4.0 * det;
            let oracle = if disc >= 0.0 {
                let r = disc.sqrt();
                ((tr + r) / 2.0).abs().max(((tr - r) / 2.0).abs())
            } else {
                det.sqrt()
            };
            prop_assert!((spectral_radius(m.view()).unwrap() - oracle).abs() < 1e-8);
        }
    }
}
