//! Full-batch training loop shared by behavior cloning and LVR, plus
//! closed-loop rollout evaluation.

use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::envs::{rng_for, rollout, streams, Controller, Environment};
use crate::error::{LvrError, Result};
use crate::graph::{GraphConfig, KnnGraph};
use crate::loss::{LossConfig, LossReport, LvrObjective};
use crate::policy::{init_params, InitScheme, Policy, Standardizer, DEFAULT_HIDDEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub loss: LossConfig,
    pub graph: GraphConfig,
    /// Epochs between progress callbacks; 0 disables them.
    pub log_every: usize,
    /// Stop after this many epochs without a relative improvement of
    /// `early_stop_tol` in the total loss.
    pub early_stop_patience: Option<usize>,
    pub early_stop_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            loss: LossConfig::default(),
            graph: GraphConfig::default(),
            log_every: 0,
            early_stop_patience: None,
            early_stop_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(LvrError::config("train.epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LvrError::config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(LvrError::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(LvrError::config(format!("train.hidden must list positive widths, got {:?}", self.hidden)));
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Same configuration with the KL weight forced to zero.
    pub fn behavior_cloning(&self) -> Self {
        let mut cfg = self.clone();
        cfg.loss.lambda = 0.0;
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    /// Parameters with the lowest total loss seen during training.
    pub policy: Policy,
    pub best_epoch: usize,
    /// One report per completed epoch, evaluated before that epoch's update.
    pub history: Vec<LossReport>,
    pub wall_seconds: f64,
    pub config: TrainConfig,
    pub graph: KnnGraph,
}

impl TrainResult {
    pub fn best_report(&self) -> &LossReport {
        &self.history[self.best_epoch]
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Fresh policy with inputs standardized on `data`.
pub fn initial_policy(data: &Dataset, cfg: &TrainConfig) -> Result<Policy> {
    let norm = Standardizer::fit(data.states.view())?;
    let mut widths = vec![data.state_dim()];
    widths.extend(&cfg.hidden);
    widths.push(data.action_dim());
    let init_seed = rng_for(cfg.seed, streams::INIT).next_u64();
    let net = init_params(init_seed, &widths, InitScheme::GlorotUniform)?;
    Policy::new(net, norm)
}

/// Trains from a fresh initialization. `progress` is called every
/// `log_every` epochs with the epoch index and its report.
pub fn train(data: &Dataset, cfg: &TrainConfig, mut progress: impl FnMut(usize, &LossReport)) -> Result<TrainResult> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(LvrError::invalid_input("cannot train on an empty dataset"));
    }
    let start = Instant::now();
    let mut policy = initial_policy(data, cfg)?;
    let standardized = policy.input_norm.apply(data.states.view());
    let graph = KnnGraph::build(standardized.view(), cfg.graph)?;
    let objective = LvrObjective::new(data, &graph, cfg.loss)?;

    let n_params = policy.net.num_params();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, policy.clone());
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let (report, grads) = objective.evaluate(&policy, cfg.loss.lambda > 0.0)?;
        if !report.is_finite() || !grads.is_finite() {
            return Err(LvrError::Diverged {
                epoch,
                l_bc: report.l_bc,
                l_kl: report.l_kl,
            });
        }
        history.push(report);
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            progress(epoch, &report);
        }
        if report.total < best.0 {
            let improved = report.total < best.0 * (1.0 - cfg.early_stop_tol);
            best = (report.total, epoch, policy.clone());
            if improved {
                stale = 0;
            } else {
                stale += 1;
            }
        } else {
            stale += 1;
        }
        if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
            break;
        }
        if epoch + 1 == cfg.epochs {
            break;
        }

        let mut params = policy.net.to_flat();
        let g = grads.to_flat();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, gi) in params.iter_mut().zip(&g) {
                    *p -= cfg.learning_rate * gi;
                }
            }
            Optimizer::Adam => {
                adam.t += 1;
                let c1 = 1.0 - cfg.beta1.powi(adam.t);
                let c2 = 1.0 - cfg.beta2.powi(adam.t);
                for i in 0..n_params {
                    adam.m[i] = cfg.beta1 * adam.m[i] + (1.0 - cfg.beta1) * g[i];
                    adam.v[i] = cfg.beta2 * adam.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    let mh = adam.m[i] / c1;
                    let vh = adam.v[i] / c2;
                    params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
        policy.net.assign_flat(&params)?;
    }
    Ok(TrainResult {
        policy: best.2,
        best_epoch: best.1,
        history,
        wall_seconds: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        graph,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Control periods before falling, capped at the horizon.
    pub survival: usize,
    /// Sum of per-step tracking rewards (stand-in for a task return).
    pub tracking_return: f64,
    pub crossings: usize,
    pub fallen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub horizon: usize,
    pub episodes: Vec<EpisodeMetrics>,
    pub mean_survival: f64,
    pub std_survival: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_crossings: f64,
    /// Fraction of episodes that reached the horizon.
    pub survival_fraction: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// RNG for episode `i` of an evaluation seeded with `seed`.
pub fn episode_rng(seed: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    rng_for(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)), streams::EVAL)
}

/// Rolls out `ctrl` from `episodes` randomized starts. Episodes run in
/// parallel; results are ordered by episode index.
pub fn evaluate_controller<E: Environment>(
    ctrl: &dyn Controller,
    env: &E,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> RolloutMetrics {
    let per: Vec<EpisodeMetrics> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, i);
            let start = env.perturbed_state(&mut rng);
            let t = rollout(env, start, ctrl, horizon, &mut rng);
            EpisodeMetrics {
                survival: t.survived,
                tracking_return: t.rewards.iter().sum(),
                crossings: t.section_hits.len(),
                fallen: t.fallen,
            }
        })
        .collect();
    let (mean_survival, std_survival) = mean_std(per.iter().map(|e| e.survival as f64));
    let (mean_return, std_return) = mean_std(per.iter().map(|e| e.tracking_return));
    let (mean_crossings, _) = mean_std(per.iter().map(|e| e.crossings as f64));
    let survival_fraction = per.iter().filter(|e| e.survival == horizon).count() as f64 / episodes.max(1) as f64;
    RolloutMetrics {
        horizon,
        episodes: per,
        mean_survival,
        std_survival,
        mean_return,
        std_return,
        mean_crossings,
        survival_fraction,
    }
}

/// [`evaluate_controller`] for a trained policy, checking dimensions first.
pub fn evaluate_checkpoint<E: Environment>(
    policy: &Policy,
    env: &E,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<RolloutMetrics> {
    if policy.state_dim() != env.obs_dim() || policy.action_dim() != env.action_dim() {
        return Err(LvrError::invalid_input(format!(
            "policy maps {} -> {} but {} expects {} -> {}",
            policy.state_dim(),
            policy.action_dim(),
            env.name(),
            env.obs_dim(),
            env.action_dim()
        )));
    }
    Ok(evaluate_controller(policy, env, episodes, horizon, seed))
}
