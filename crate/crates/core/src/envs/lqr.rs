//! Riccati recursions and the synthetic feedback-gain regression experiment.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};
use crate::numerics::{operator_norm, pseudo_inverse, symmetric_eigen};

fn riccati_update(
    a: &Array2<f64>,
    b: &Array2<f64>,
    q: &Array2<f64>,
    r: &Array2<f64>,
    p: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let pb = p.dot(b);
    let s = r + &b.t().dot(&pb);
    let k = pseudo_inverse(s.view())?.dot(&pb.t().dot(a));
    let next = q + &a.t().dot(p).dot(&(a - &b.dot(&k)));
    let next = (&next + &next.t()) * 0.5;
    if !next.iter().all(|v| v.is_finite()) {
        return Err(LvrError::config("Riccati recursion diverged"));
    }
    Ok((k, next))
}

/// Backward sweep over a time-varying discrete system. Returns the gains
/// `K_k` (with `u_k = -K_k x_k`) in forward order and the cost-to-go at
/// the first step.
pub fn riccati_sweep(
    a_seq: &[Array2<f64>],
    b_seq: &[Array2<f64>],
    q: &Array2<f64>,
    r: &Array2<f64>,
    terminal: &Array2<f64>,
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    if a_seq.len() != b_seq.len() || a_seq.is_empty() {
        return Err(LvrError::invalid_input("Riccati sweep needs matching non-empty A and B sequences"));
    }
    let mut p = terminal.clone();
    let mut gains = vec![Array2::zeros((0, 0)); a_seq.len()];
    for k in (0..a_seq.len()).rev() {
        let (gain, next) = riccati_update(&a_seq[k], &b_seq[k], q, r, &p)?;
        gains[k] = gain;
        p = next;
    }
    Ok((gains, p))
}

/// Infinite-horizon discrete Riccati solution by fixed-point iteration.
/// Returns `(K, P)`.
pub fn solve_dare(a: &Array2<f64>, b: &Array2<f64>, q: &Array2<f64>, r: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let (k, next) = riccati_update(a, b, q, r, &p)?;
        let change = (&next - &p).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = next.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        p = next;
        if change < 1e-13 * scale {
            return Ok((k, p));
        }
    }
    Err(LvrError::config("discrete Riccati iteration did not converge"))
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Random stable linear system with its optimal gain (`Q = I`, `R = I`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSyntheticEnv {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub k_star: Array2<f64>,
    /// Std of the noise added to recorded actions.
    pub noise_std: f64,
}

impl LqrSyntheticEnv {
    pub fn random(state_dim: usize, action_dim: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if state_dim == 0 || state_dim > 10 || action_dim == 0 {
            return Err(LvrError::invalid_parameter(format!(
                "synthetic LQR needs 1 <= state dim <= 10 and action dim >= 1, got {state_dim}, {action_dim}"
            )));
        }
        if noise_std < 0.0 {
            return Err(LvrError::invalid_parameter("noise std must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = gaussian_matrix(&mut rng, state_dim, state_dim, 1.0);
        // Operator norm below one bounds the spectral radius below one.
        let a = &raw * (0.9 / operator_norm(raw.view())?);
        let b = gaussian_matrix(&mut rng, state_dim, action_dim, 1.0);
        let (k_star, _) = solve_dare(&a, &b, &Array2::eye(state_dim), &Array2::eye(action_dim))?;
        Ok(Self { a, b, k_star, noise_std })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self) -> Array2<f64> {
        &self.a - &self.b.dot(&self.k_star)
    }

    /// Least-squares gain from `n` samples `δu = -K* δx + noise`, with
    /// `δx ~ N(0, diag(excitation))`. `None` when the design is singular.
    pub fn fit_gain(&self, n: usize, excitation: &[f64], rng: &mut ChaCha8Rng) -> Result<Option<Array2<f64>>> {
        let p = self.state_dim();
        let mut x = gaussian_matrix(rng, n, p, 1.0);
        for (mut col, var) in x.axis_iter_mut(Axis(1)).zip(excitation) {
            col *= var.sqrt();
        }
        let noise = gaussian_matrix(rng, n, self.action_dim(), self.noise_std);
        let u = -x.dot(&self.k_star.t()) + noise;
        let gram = x.t().dot(&x);
        let (eig, _) = symmetric_eigen(gram.view())?;
        let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if n < p || min_eig <= 1e-10 * n as f64 {
            return Ok(None);
        }
        let kt = -pseudo_inverse(gram.view())?.dot(&x.t().dot(&u));
        Ok(Some(kt.reversed_axes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub n: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub trials_ok: usize,
    pub failures: usize,
}

/// Gain error against sample count, plus the log-log slope over the
/// rows that had at least one successful fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTable {
    pub rows: Vec<RegressionRow>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Ordinary least-squares line through `(x, y)`; `None` for fewer than two
/// distinct abscissae.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// For each sample count, fits `K̂` in `trials` independent draws and
/// records the operator-norm error `‖K̂ − K*‖`.
pub fn lqr_regression_experiment(
    env: &LqrSyntheticEnv,
    sample_counts: &[usize],
    trials: usize,
    seed: u64,
    excitation: Option<&[f64]>,
) -> Result<RegressionTable> {
    if trials == 0 || sample_counts.is_empty() {
        return Err(LvrError::invalid_parameter("need at least one sample count and one trial"));
    }
    let ones = vec![1.0; env.state_dim()];
    let excitation = excitation.unwrap_or(&ones);
    if excitation.len() != env.state_dim() || excitation.iter().any(|v| !(*v >= 0.0)) {
        return Err(LvrError::invalid_parameter("excitation must give one non-negative variance per state"));
    }
    let rows = sample_counts
        .iter()
        .enumerate()
        .map(|(ci, &n)| {
            let errors: Vec<Option<f64>> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((ci * trials + t) as u64);
                    match env.fit_gain(n, excitation, &mut rng)? {
                        Some(k) => Ok(Some(operator_norm((&k - &env.k_star).view())?)),
                        None => Ok(None),
                    }
                })
                .collect::<Result<_>>()?;
            let ok: Vec<f64> = errors.iter().flatten().copied().collect();
            let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
            let var = if ok.len() > 1 {
                ok.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64
            } else {
                0.0
            };
            Ok(RegressionRow {
                n,
                mean_error: mean,
                std_error: var.sqrt(),
                trials_ok: ok.len(),
                failures: trials - ok.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let usable: Vec<&RegressionRow> = rows.iter().filter(|r| r.trials_ok > 0 && r.mean_error > 0.0).collect();
    let lx: Vec<f64> = usable.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = usable.iter().map(|r| r.mean_error.ln()).collect();
    let fit = fit_line(&lx, &ly);
    Ok(RegressionTable {
        rows,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
    })
}
