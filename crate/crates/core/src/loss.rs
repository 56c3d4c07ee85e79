//! Behavior-cloning loss, orientation distributions and the KL alignment
//! term, with exact gradients.
//!
//! For an edge `e = (i, j)` the latent chord is `phi(x_j) - phi(x_i)`. Chords
//! are optionally projected onto the row space of the readout `W`, turned into
//! a softmax over cosine similarities with the chords in `N(e)`, and compared
//! against the same construction applied to expert control deltas.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LvrError, Result};
use crate::graph::{edge_deltas, Edge, KnnGraph, DEGENERATE_DELTA};
use crate::numerics::{pseudo_inverse, row_space_projection, softmax_unchecked, DiscreteDistribution, KL_FLOOR};
use crate::policy::{GradientBundle, OutputGrad, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// Project chords with `W^T (W W^T)^+ W`.
    #[default]
    RowSpace,
    /// Use raw chords.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the KL term.
    pub lambda: f64,
    pub projection: ProjectionMode,
    /// Treat the projector as a constant when differentiating.
    pub stop_grad_projection: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.1,
            projection: ProjectionMode::RowSpace,
            stop_grad_projection: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(LvrError::invalid_parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LvrError::invalid_parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_bc: f64,
    pub l_kl: f64,
    pub total: f64,
    pub degenerate_edges: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_bc.is_finite() && self.l_kl.is_finite() && self.total.is_finite()
    }
}

/// `phi(x_j) - phi(x_i)` for each edge, from precomputed latents.
pub fn chords_from_latents(latents: ArrayView2<f64>, edges: &[Edge]) -> Array2<f64> {
    let mut out = Array2::zeros((edges.len(), latents.ncols()));
    for (e, &(i, j)) in edges.iter().enumerate() {
        let mut row = out.row_mut(e);
        row.assign(&latents.row(j));
        row -= &latents.row(i);
    }
    out
}

/// Exact latent chords of `policy` over `edges`.
pub fn latent_chords(policy: &Policy, data: &Dataset, edges: &[Edge]) -> Result<Array2<f64>> {
    let latents = policy.latents(data.states.view())?;
    Ok(chords_from_latents(latents.view(), edges))
}

/// Projection matrix selected by `mode` for readout `w` (`latent x latent`).
pub fn projection_matrix(w: ArrayView2<f64>, mode: ProjectionMode) -> Result<Array2<f64>> {
    match mode {
        ProjectionMode::RowSpace => row_space_projection(w),
        ProjectionMode::Identity => Ok(Array2::eye(w.ncols())),
    }
}

/// Projects each chord (row) onto the row space of `w`, or passes it through
/// in identity mode.
pub fn project_chords(chords: ArrayView2<f64>, w: ArrayView2<f64>, cfg: &LossConfig) -> Result<Array2<f64>> {
    if chords.ncols() != w.ncols() {
        return Err(LvrError::invalid_input(format!(
            "chord dimension {} does not match readout columns {}",
            chords.ncols(),
            w.ncols()
        )));
    }
    match cfg.projection {
        ProjectionMode::Identity => Ok(chords.to_owned()),
        // P is symmetric, so projecting rows is a right multiplication.
        ProjectionMode::RowSpace => Ok(chords.dot(&row_space_projection(w)?)),
    }
}

fn row_norm(m: &ArrayView2<f64>, r: usize) -> f64 {
    m.row(r).dot(&m.row(r)).sqrt()
}

/// Orientation distribution of edge `neighborhood[0]` over its neighborhood:
/// softmax over `j` of `cos(delta_e, delta_j) / tau`.
///
/// Members whose delta norm is below the degeneracy threshold are dropped;
/// returns `None` when the anchor itself is degenerate. The returned support
/// lists the surviving edge indices in neighborhood order.
pub fn orientation_distribution(
    deltas: ArrayView2<f64>,
    neighborhood: &[usize],
    tau: f64,
) -> Result<Option<(Vec<usize>, DiscreteDistribution)>> {
    if !(tau > 0.0) {
        return Err(LvrError::invalid_parameter(format!("tau must be > 0, got {tau}")));
    }
    let Some(&anchor) = neighborhood.first() else {
        return Ok(None);
    };
    let na = row_norm(&deltas, anchor);
    if na < DEGENERATE_DELTA {
        return Ok(None);
    }
    let support: Vec<usize> = neighborhood
        .iter()
        .copied()
        .filter(|&f| row_norm(&deltas, f) >= DEGENERATE_DELTA)
        .collect();
    let scores: Vec<f64> = support
        .iter()
        .map(|&f| deltas.row(anchor).dot(&deltas.row(f)) / (na * row_norm(&deltas, f)))
        .collect();
    let probs = softmax_unchecked(&scores, tau);
    Ok(Some((support, DiscreteDistribution::new(probs)?)))
}

/// Mean squared action error `E_i ||W phi(x_i) + b - u_i||^2`.
pub fn bc_loss(policy: &Policy, data: &Dataset) -> Result<f64> {
    let tape = policy.forward(data.states.view())?;
    let resid = &tape.action - &data.actions;
    Ok(resid.mapv(|r| r * r).sum() / data.len() as f64)
}

/// Precomputed control-space orientation distributions `p_U(. | e)`.
///
/// These depend only on the data and the graph, so they are built once.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOrientation {
    /// Per edge: surviving support (edge indices) and log-probabilities, or
    /// `None` when the anchor's control delta is degenerate.
    pub per_edge: Vec<Option<(Vec<usize>, Vec<f64>)>>,
    pub tau: f64,
}

impl ControlOrientation {
    pub fn new(du: ArrayView2<f64>, graph: &KnnGraph, tau: f64) -> Result<Self> {
        let per_edge = graph
            .neighborhoods
            .iter()
            .map(|nbh| {
                Ok(orientation_distribution(du, nbh, tau)?
                    .map(|(s, p)| (s, p.probs().iter().map(|q| q.max(KL_FLOOR).ln()).collect())))
            })
            .collect::<Result<_>>()?;
        Ok(Self { per_edge, tau })
    }
}

/// The full LVR objective for one dataset and graph. Building it precomputes
/// the expert deltas and `p_U`.
#[derive(Debug, Clone)]
pub struct LvrObjective<'a> {
    pub data: &'a Dataset,
    pub graph: &'a KnnGraph,
    pub cfg: LossConfig,
    du: Array2<f64>,
    p_u: ControlOrientation,
}

struct KlPass {
    value: f64,
    degenerate: usize,
    /// Gradient w.r.t. projected chords, already divided by the edge count.
    grad: Option<Array2<f64>>,
}

impl<'a> LvrObjective<'a> {
    pub fn new(data: &'a Dataset, graph: &'a KnnGraph, cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if let Some(&(i, j)) = graph.edges.iter().find(|&&(i, j)| i >= data.len() || j >= data.len()) {
            return Err(LvrError::invalid_input(format!("edge ({i}, {j}) out of range for {} samples", data.len())));
        }
        let du = edge_deltas(data, &graph.edges).du;
        let p_u = ControlOrientation::new(du.view(), graph, cfg.tau)?;
        Ok(Self {
            data,
            graph,
            cfg,
            du,
            p_u,
        })
    }

    pub fn control_orientation(&self) -> &ControlOrientation {
        &self.p_u
    }

    /// Mean over non-degenerate edges of `KL(p_H || p_U)`, given projected
    /// chords (one row per edge).
    fn kl_pass(&self, g: ArrayView2<f64>, want_grad: bool) -> KlPass {
        let tau = self.cfg.tau;
        let n_edges = g.nrows();
        let dim = g.ncols();
        let norms: Vec<f64> = (0..n_edges).map(|e| row_norm(&g, e)).collect();
        let mut unit = g.to_owned();
        for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(&norms) {
            if n >= DEGENERATE_DELTA {
                row /= n;
            }
        }
        let unit_s = unit.as_slice().expect("standard layout");
        let row = |e: usize| &unit_s[e * dim..(e + 1) * dim];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let mut grad = want_grad.then(|| Array2::<f64>::zeros((n_edges, dim)));
        let mut total = 0.0;
        let mut counted = 0usize;
        let mut degenerate = 0usize;
        // (edge, d KL / d score) per support member, reused across edges
        let mut coeffs: Vec<(usize, f64, f64)> = Vec::new();
        let mut reduced_support: Vec<usize> = Vec::new();
        let mut reduced_logq: Vec<f64> = Vec::new();

        for (e, entry) in self.p_u.per_edge.iter().enumerate() {
            let Some((support, log_q)) = entry else {
                degenerate += 1;
                continue;
            };
            if norms[e] < DEGENERATE_DELTA {
                degenerate += 1;
                continue;
            }
            let (support, log_q): (&[usize], &[f64]) = if support.iter().any(|&f| norms[f] < DEGENERATE_DELTA) {
                // Rare path: a latent chord collapsed, so shrink both supports
                // and renormalize p_U on what is left.
                reduced_support.clear();
                reduced_support.extend(support.iter().copied().filter(|&f| norms[f] >= DEGENERATE_DELTA));
                let du = self.du.view();
                let nu_e = row_norm(&du, e);
                let scores: Vec<f64> = reduced_support
                    .iter()
                    .map(|&f| du.row(e).dot(&du.row(f)) / (nu_e * row_norm(&du, f)))
                    .collect();
                reduced_logq.clear();
                reduced_logq.extend(softmax_unchecked(&scores, tau).iter().map(|q| q.max(KL_FLOOR).ln()));
                (&reduced_support, &reduced_logq)
            } else {
                (support, log_q)
            };

            let ue = row(e);
            let scores: Vec<f64> = support.iter().map(|&f| dot(ue, row(f))).collect();
            let p = softmax_unchecked(&scores, tau);
            let kl: f64 = p
                .iter()
                .zip(log_q)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, lq)| pi * (pi.ln() - lq))
                .sum();
            total += kl;
            counted += 1;

            if grad.is_some() {
                coeffs.clear();
                for ((&f, &pi), (&lq, &s)) in support.iter().zip(&p).zip(log_q.iter().zip(&scores)) {
                    if f == e || pi == 0.0 {
                        continue;
                    }
                    let a = pi * (pi.ln() - lq - kl) / tau;
                    coeffs.push((f, a, s));
                }
                let ge = grad.as_mut().unwrap();
                let inv_e = 1.0 / norms[e];
                for &(f, a, s) in &coeffs {
                    // d cos / d g_e = (u_f - s u_e) / |g_e|
                    let uf = row(f);
                    let mut gr = ge.row_mut(e);
                    for ((gk, &ufk), &uek) in gr.iter_mut().zip(uf).zip(ue) {
                        *gk += a * (ufk - s * uek) * inv_e;
                    }
                    // d cos / d g_f = (u_e - s u_f) / |g_f|
                    let inv_f = 1.0 / norms[f];
                    let mut gr = ge.row_mut(f);
                    for ((gk, &ufk), &uek) in gr.iter_mut().zip(uf).zip(ue) {
                        *gk += a * (uek - s * ufk) * inv_f;
                    }
                }
            }
        }
        let value = if counted > 0 { (total / counted as f64).max(0.0) } else { 0.0 };
        if let Some(ge) = grad.as_mut() {
            if counted > 0 {
                *ge /= counted as f64;
            }
        }
        KlPass {
            value,
            degenerate,
            grad,
        }
    }

    /// `L_KL` for the current policy.
    pub fn kl_loss(&self, policy: &Policy) -> Result<(f64, usize)> {
        let latents = policy.latents(self.data.states.view())?;
        let chords = chords_from_latents(latents.view(), &self.graph.edges);
        let g = project_chords(chords.view(), policy.net.readout.weight.view(), &self.cfg)?;
        let pass = self.kl_pass(g.view(), false);
        Ok((pass.value, pass.degenerate))
    }

    /// Loss report and exact parameter gradient of `L_BC + lambda L_KL`.
    ///
    /// With `apply_kl = false` the KL term is evaluated for the report only
    /// and contributes nothing to the gradient (plain behavior cloning).
    pub fn evaluate(&self, policy: &Policy, apply_kl: bool) -> Result<(LossReport, GradientBundle)> {
        let data = self.data;
        let tape = policy.forward(data.states.view())?;
        let n = data.len() as f64;
        let resid = &tape.action - &data.actions;
        let l_bc = resid.mapv(|r| r * r).sum() / n;
        let action_grad = resid * (2.0 / n);

        let w = policy.net.readout.weight.view();
        let chords = chords_from_latents(tape.latent().view(), &self.graph.edges);
        let proj = projection_matrix(w, self.cfg.projection)?;
        let g = match self.cfg.projection {
            ProjectionMode::Identity => chords.clone(),
            ProjectionMode::RowSpace => chords.dot(&proj),
        };
        let use_kl_grad = apply_kl && self.cfg.lambda > 0.0;
        let pass = self.kl_pass(g.view(), use_kl_grad);
        let report = LossReport {
            l_bc,
            l_kl: pass.value,
            total: l_bc + self.cfg.lambda * pass.value,
            degenerate_edges: pass.degenerate,
        };

        let Some(mut g_bar) = pass.grad else {
            let grads = policy.net.backward(&tape, OutputGrad::Action(action_grad.view()))?;
            return Ok((report, grads));
        };
        g_bar *= self.cfg.lambda;

        let mut extra_w: Option<Array2<f64>> = None;
        let chord_bar = match self.cfg.projection {
            ProjectionMode::Identity => g_bar,
            ProjectionMode::RowSpace => {
                if !self.cfg.stop_grad_projection {
                    // dL/dP = sum_e g_bar_e c_e^T; dL/dW = G W S (I - P) with
                    // G = (W W^T)^+ and S = dL/dP + dL/dP^T.
                    let p_bar = g_bar.t().dot(&chords);
                    let s = &p_bar + &p_bar.t();
                    let gram_pinv = pseudo_inverse(w.dot(&w.t()).view())?;
                    let eye = Array2::<f64>::eye(proj.nrows());
                    extra_w = Some(gram_pinv.dot(&w).dot(&s).dot(&(&eye - &proj)));
                }
                g_bar.dot(&proj)
            }
        };
        let mut latent_grad = Array2::<f64>::zeros(tape.latent().raw_dim());
        for (e, &(i, j)) in self.graph.edges.iter().enumerate() {
            let c = chord_bar.row(e);
            {
                let mut rj = latent_grad.row_mut(j);
                rj += &c;
            }
            let mut ri = latent_grad.row_mut(i);
            ri -= &c;
        }
        let mut grads = policy.net.backward(
            &tape,
            OutputGrad::Both {
                action: action_grad.view(),
                latent: latent_grad.view(),
            },
        )?;
        if let Some(dw) = extra_w {
            grads.readout.weight += &dw;
        }
        Ok((report, grads))
    }
}

/// `L_KL` for `policy` on `data` with graph `graph`.
pub fn kl_alignment_loss(policy: &Policy, data: &Dataset, graph: &KnnGraph, cfg: &LossConfig) -> Result<f64> {
    Ok(LvrObjective::new(data, graph, *cfg)?.kl_loss(policy)?.0)
}

/// One-shot loss and gradient; training code keeps an [`LvrObjective`]
/// around instead so `p_U` is built once.
pub fn total_loss_and_grad(
    policy: &Policy,
    data: &Dataset,
    graph: &KnnGraph,
    cfg: &LossConfig,
) -> Result<(LossReport, GradientBundle)> {
    LvrObjective::new(data, graph, *cfg)?.evaluate(policy, true)
}
