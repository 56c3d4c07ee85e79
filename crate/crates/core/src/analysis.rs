//! Return-map stability, latent-difference geometry and BC/LVR sweeps.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::envs::{generate_demos, return_to_section, rng_for, streams, Controller, Environment};
use crate::error::{LvrError, Result};
use crate::numerics::{cosine_similarity, eigenvalue_magnitudes, pca, pseudo_inverse};
use crate::policy::Policy;
use crate::trainer::{evaluate_controller, train, RolloutMetrics, TrainConfig};

/// Central finite-difference Jacobian of `f` at `x`; `None` if any
/// perturbed evaluation fails.
pub fn fd_jacobian<F>(f: F, x: &[f64], h: f64) -> Option<Array2<f64>>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let n = x.len();
    let mut jac: Option<Array2<f64>> = None;
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp)?, f(&xm)?);
        let jm = jac.get_or_insert_with(|| Array2::zeros((fp.len(), n)));
        for i in 0..fp.len() {
            jm[[i, j]] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoincareConfig {
    pub n_crossings: usize,
    pub fd_step: f64,
    /// Newton iterations on `P(x) - x` after averaging late crossings.
    pub newton_steps: usize,
    pub stable_radius: f64,
    pub residual_tol: f64,
    /// Control periods allowed between two crossings.
    pub max_steps_per_return: usize,
}

impl Default for PoincareConfig {
    fn default() -> Self {
        Self {
            n_crossings: 40,
            fd_step: 1e-4,
            newton_steps: 5,
            stable_radius: 0.98,
            residual_tol: 1e-3,
            max_steps_per_return: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareAnalysis {
    pub section: String,
    pub fixed_point: Vec<f64>,
    /// `|P(x*) - x*|` (max norm).
    pub residual: f64,
    pub jacobian: Vec<Vec<f64>>,
    pub eigenvalue_magnitudes: Vec<f64>,
    pub spectral_radius: f64,
    pub crossings: Vec<Vec<f64>>,
    pub verdict: Verdict,
    pub reason: Option<String>,
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fixed point and linearized return map of the closed loop on the
/// environment's section, starting from section coordinates `x0`.
///
/// Process noise is switched off; `seed` only drives environment
/// randomness such as rough ground.
pub fn estimate_return_map<E: Environment>(
    env: &E,
    ctrl: &dyn Controller,
    x0: &[f64],
    cfg: &PoincareConfig,
    seed: u64,
) -> Result<PoincareAnalysis> {
    if x0.len() != env.section_dim() {
        return Err(LvrError::invalid_input(format!(
            "section start has {} coordinates, expected {}",
            x0.len(),
            env.section_dim()
        )));
    }
    let env = env.with_noise(0.0);
    let section = format!("{} apex/upward crossing", env.name());
    let unstable = |crossings: Vec<Vec<f64>>, reason: String| PoincareAnalysis {
        section: section.clone(),
        fixed_point: crossings.last().cloned().unwrap_or_else(|| x0.to_vec()),
        residual: f64::INFINITY,
        jacobian: Vec::new(),
        eigenvalue_magnitudes: Vec::new(),
        spectral_radius: f64::INFINITY,
        crossings,
        verdict: Verdict::Unstable,
        reason: Some(reason),
    };

    let mut rng = rng_for(seed, streams::ANALYSIS);
    let mut crossings: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_crossings);
    let mut x = x0.to_vec();
    for _ in 0..cfg.n_crossings {
        match return_to_section(&env, &x, ctrl, cfg.max_steps_per_return, &mut rng) {
            Some(next) => {
                crossings.push(next.clone());
                x = next;
            }
            None => {
                let reason = format!("closed loop failed after {} crossings", crossings.len());
                return Ok(unstable(crossings, reason));
            }
        }
    }

    let tail = &crossings[crossings.len() - (crossings.len() / 4).max(1)..];
    let dim = x0.len();
    let mut fixed: Vec<f64> = (0..dim).map(|i| tail.iter().map(|c| c[i]).sum::<f64>() / tail.len() as f64).collect();

    // Each return restarts the analysis RNG so the map is a deterministic
    // function of the section point.
    let map = |p: &[f64]| {
        let mut r = rng_for(seed, streams::ANALYSIS);
        return_to_section(&env, p, ctrl, cfg.max_steps_per_return, &mut r)
    };
    let Some(mut image) = map(&fixed) else {
        return Ok(unstable(crossings, "no return from the averaged fixed point".into()));
    };
    let mut residual = max_gap(&image, &fixed);
    for _ in 0..cfg.newton_steps {
        if residual < 1e-12 {
            break;
        }
        let Some(j) = fd_jacobian(map, &fixed, cfg.fd_step) else { break };
        let step = pseudo_inverse((&j - &Array2::<f64>::eye(dim)).view())?
            .dot(&ndarray::Array1::from_iter(image.iter().zip(&fixed).map(|(a, b)| a - b)));
        let candidate: Vec<f64> = fixed.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
        let Some(cand_image) = map(&candidate) else { break };
        let cand_residual = max_gap(&cand_image, &candidate);
        if !(cand_residual < residual) {
            break;
        }
        fixed = candidate;
        image = cand_image;
        residual = cand_residual;
    }

    let Some(jac) = fd_jacobian(map, &fixed, cfg.fd_step) else {
        return Ok(unstable(crossings, "perturbed return failed near the fixed point".into()));
    };
    let mags = eigenvalue_magnitudes(jac.view())?;
    let radius = mags.iter().cloned().fold(0.0, f64::max);
    let stable = radius < cfg.stable_radius && residual < cfg.residual_tol;
    let reason = (!stable).then(|| format!("spectral radius {radius:.4}, fixed-point residual {residual:.2e}"));
    Ok(PoincareAnalysis {
        section,
        fixed_point: fixed,
        residual,
        jacobian: jac.outer_iter().map(|r| r.to_vec()).collect(),
        eigenvalue_magnitudes: mags,
        spectral_radius: radius,
        crossings,
        verdict: if stable { Verdict::Stable } else { Verdict::Unstable },
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGeometryReport {
    /// Non-increasing fraction of variance per principal component.
    pub variance_ratios: Vec<f64>,
    /// Cosine of each consecutive latent difference with PC1.
    pub pc1_cosines: Vec<f64>,
    /// Mean same-mode cosine minus mean cross-mode cosine of the differences.
    pub bundle_separation: Option<f64>,
    /// All latent differences vanish.
    pub degenerate: bool,
    pub num_deltas: usize,
}

impl LatentGeometryReport {
    pub fn pc1_ratio(&self) -> f64 {
        self.variance_ratios.first().copied().unwrap_or(0.0)
    }
}

/// Geometry of consecutive latent differences `h_{t+1} - h_t`. `labels`
/// gives one mode label per row of `latents`; differences take the label
/// of their starting row.
pub fn latent_geometry_from_latents(latents: ArrayView2<f64>, labels: Option<&[usize]>) -> Result<LatentGeometryReport> {
    let t = latents.nrows();
    if t < 10 {
        return Err(LvrError::invalid_input(format!("latent geometry needs at least 10 samples, got {t}")));
    }
    if let Some(l) = labels {
        if l.len() != t {
            return Err(LvrError::invalid_input(format!("{} labels for {t} samples", l.len())));
        }
    }
    let deltas = &latents.slice(ndarray::s![1.., ..]) - &latents.slice(ndarray::s![..-1, ..]);
    let n = deltas.nrows();
    let degenerate = deltas.iter().all(|v| v.abs() < 1e-12);
    if degenerate {
        return Ok(LatentGeometryReport {
            variance_ratios: vec![0.0; deltas.ncols().min(n)],
            pc1_cosines: vec![0.0; n],
            bundle_separation: None,
            degenerate: true,
            num_deltas: n,
        });
    }
    let k = deltas.ncols().min(n);
    let p = pca(deltas.view(), k)?;
    let pc1 = p.components.row(0);
    let pc1_cosines = deltas.axis_iter(Axis(0)).map(|d| cosine_similarity(d, pc1)).collect();

    let bundle_separation = labels.and_then(|labels| {
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for a in 0..n {
            for b in a + 1..n {
                let c = cosine_similarity(deltas.row(a), deltas.row(b));
                if labels[a] == labels[b] {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        (ni > 0 && nx > 0).then(|| intra / ni as f64 - inter / nx as f64)
    });
    Ok(LatentGeometryReport {
        variance_ratios: p.variance_ratios().to_vec(),
        pc1_cosines,
        bundle_separation,
        degenerate: false,
        num_deltas: n,
    })
}

/// [`latent_geometry_from_latents`] on the policy's latents along `data`.
pub fn latent_geometry(policy: &Policy, data: &Dataset, labels: Option<&[usize]>) -> Result<LatentGeometryReport> {
    let h = policy.latents(data.states.view())?;
    latent_geometry_from_latents(h.view(), labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Expert,
    Bc,
    Lvr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Expert => "expert",
            Method::Bc => "bc",
            Method::Lvr => "lvr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    DatasetSize,
    Perturbation,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::DatasetSize => "dataset_size",
            SweepAxis::Perturbation => "perturbation",
        }
    }
}

/// Shared settings for sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub train: TrainConfig,
    pub episodes: usize,
    pub horizon: usize,
    pub demo_noise: f64,
    /// Demonstration length for the perturbation sweep.
    pub demo_steps: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            episodes: 100,
            horizon: 500,
            demo_noise: 0.02,
            demo_steps: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub method: Method,
    pub seed: u64,
    pub mean_survival: f64,
    pub survival_fraction: f64,
    pub mean_return: f64,
    pub final_l_bc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub value: f64,
    pub method: Method,
    pub runs: usize,
    pub failed_runs: usize,
    pub mean_survival: f64,
    pub std_survival: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_survival_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Mean and standard deviation per `(value, method)` over successful seeds.
    pub fn summary(&self) -> Vec<SweepSummaryRow> {
        let mut keys: Vec<(f64, Method)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|k| k.0 == c.value && k.1 == c.method) {
                keys.push((c.value, c.method));
            }
        }
        keys.into_iter()
            .map(|(value, method)| {
                let group: Vec<&SweepCell> = self.cells.iter().filter(|c| c.value == value && c.method == method).collect();
                let ok: Vec<&&SweepCell> = group.iter().filter(|c| c.error.is_none()).collect();
                let stats = |f: &dyn Fn(&SweepCell) -> f64| {
                    let n = ok.len() as f64;
                    if n == 0.0 {
                        return (f64::NAN, f64::NAN);
                    }
                    let m = ok.iter().map(|c| f(c)).sum::<f64>() / n;
                    let v = ok.iter().map(|c| (f(c) - m).powi(2)).sum::<f64>() / n;
                    (m, v.sqrt())
                };
                let (ms, ss) = stats(&|c| c.mean_survival);
                let (mr, sr) = stats(&|c| c.mean_return);
                let (mf, _) = stats(&|c| c.survival_fraction);
                SweepSummaryRow {
                    value,
                    method,
                    runs: group.len(),
                    failed_runs: group.len() - ok.len(),
                    mean_survival: ms,
                    std_survival: ss,
                    mean_return: mr,
                    std_return: sr,
                    mean_survival_fraction: mf,
                }
            })
            .collect()
    }

    /// Long-format CSV: `axis,value,method,seed,metric,value`. Returns are
    /// tracking returns, a substitute for a task reward.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["axis", "axis_value", "method", "seed", "metric", "value"])?;
        for c in &self.cells {
            let mut metrics = vec![
                ("survival_steps", c.mean_survival),
                ("survival_fraction", c.survival_fraction),
                ("tracking_return", c.mean_return),
            ];
            if let Some(l) = c.final_l_bc {
                metrics.push(("final_l_bc", l));
            }
            if c.error.is_some() {
                metrics = vec![("run_failed", 1.0)];
            }
            for (name, v) in metrics {
                w.write_record([
                    self.axis.as_str().to_string(),
                    format!("{}", c.value),
                    c.method.as_str().to_string(),
                    c.seed.to_string(),
                    name.to_string(),
                    format!("{v}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn cell_from_metrics(value: f64, method: Method, seed: u64, m: &RolloutMetrics, l_bc: Option<f64>) -> SweepCell {
    SweepCell {
        value,
        method,
        seed,
        mean_survival: m.mean_survival,
        survival_fraction: m.survival_fraction,
        mean_return: m.mean_return,
        final_l_bc: l_bc,
        error: None,
    }
}

fn failed_cell(value: f64, method: Method, seed: u64, err: &LvrError) -> SweepCell {
    SweepCell {
        value,
        method,
        seed,
        mean_survival: f64::NAN,
        survival_fraction: f64::NAN,
        mean_return: f64::NAN,
        final_l_bc: None,
        error: Some(err.to_string()),
    }
}

/// Evaluation seed shared by every method trained on data seed `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_0000_0000_0000
}

fn train_method(data: &Dataset, method: Method, seed: u64, settings: &SweepSettings) -> Result<(Policy, f64)> {
    let mut cfg = settings.train.clone();
    cfg.seed = seed;
    if method == Method::Bc {
        cfg = cfg.behavior_cloning();
    }
    let res = train(data, &cfg, |_, _| {})?;
    let l_bc = res.best_report().l_bc;
    Ok((res.policy, l_bc))
}

/// Train on the first `size` samples of a per-seed demonstration and
/// evaluate each method. Failed runs are recorded, not fatal.
pub fn data_efficiency_sweep<E: Environment>(
    env: &E,
    expert: &dyn Controller,
    demo_start: &E::State,
    sizes: &[usize],
    methods: &[Method],
    seeds: &[u64],
    settings: &SweepSettings,
) -> SweepResult {
    let max_size = sizes.iter().copied().max().unwrap_or(0);
    let jobs: Vec<(usize, Method, u64)> = sizes
        .iter()
        .flat_map(|&s| methods.iter().flat_map(move |&m| seeds.iter().map(move |&sd| (s, m, sd))))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(size, method, seed)| {
            let value = size as f64;
            if method == Method::Expert {
                let m = evaluate_controller(expert, env, settings.episodes, settings.horizon, eval_seed(seed));
                return cell_from_metrics(value, method, seed, &m, None);
            }
            let run = || -> Result<SweepCell> {
                let demo = generate_demos(env, expert, demo_start.clone(), max_size, settings.demo_noise, seed)?;
                let (policy, l_bc) = train_method(&demo.head(size), method, seed, settings)?;
                let m = evaluate_controller(&policy, env, settings.episodes, settings.horizon, eval_seed(seed));
                Ok(cell_from_metrics(value, method, seed, &m, Some(l_bc)))
            };
            run().unwrap_or_else(|e| failed_cell(value, method, seed, &e))
        })
        .collect();
    SweepResult {
        axis: SweepAxis::DatasetSize,
        seeds: seeds.to_vec(),
        cells,
    }
}

/// Train once per method and seed on a nominal demonstration, then
/// evaluate at each perturbation level.
pub fn robustness_sweep<E: Environment>(
    env: &E,
    expert: &dyn Controller,
    demo_start: &E::State,
    levels: &[f64],
    methods: &[Method],
    seeds: &[u64],
    settings: &SweepSettings,
) -> SweepResult {
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let per_job: Vec<Vec<SweepCell>> = jobs
        .par_iter()
        .map(|&(method, seed)| {
            let trained = if method == Method::Expert {
                Ok(None)
            } else {
                generate_demos(env, expert, demo_start.clone(), settings.demo_steps, settings.demo_noise, seed)
                    .and_then(|demo| train_method(&demo, method, seed, settings))
                    .map(Some)
            };
            levels
                .iter()
                .map(|&level| {
                    let perturbed = env.with_perturbation(level);
                    match &trained {
                        Ok(None) => {
                            let m = evaluate_controller(expert, &perturbed, settings.episodes, settings.horizon, eval_seed(seed));
                            cell_from_metrics(level, method, seed, &m, None)
                        }
                        Ok(Some((policy, l_bc))) => {
                            let m = evaluate_controller(policy, &perturbed, settings.episodes, settings.horizon, eval_seed(seed));
                            cell_from_metrics(level, method, seed, &m, Some(*l_bc))
                        }
                        Err(e) => failed_cell(level, method, seed, e),
                    }
                })
                .collect()
        })
        .collect();
    // Order cells by level, then method, then seed.
    let mut cells: Vec<SweepCell> = Vec::new();
    for li in 0..levels.len() {
        for job in &per_job {
            cells.push(job[li].clone());
        }
    }
    SweepResult {
        axis: SweepAxis::Perturbation,
        seeds: seeds.to_vec(),
        cells,
    }
}
