//! Subcommand implementations. Every artifact carries the config hash and
//! root seed; wall-clock information only goes to `*.log` files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use lvr_core::analysis::{eval_seed, latent_geometry};
use lvr_core::envs::{generate_demos_traced, rng_for, rollout, streams};
use lvr_core::presets::{hopper_setup, HopperSetup};
use lvr_core::trainer::evaluate_controller;
use lvr_core::{
    data_efficiency_sweep, estimate_return_map, robustness_sweep, Checkpoint, Controller, Dataset, Environment, Method,
    SmoothCycleEnv, SmoothCycleExpert, SweepResult, SweepSettings,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{EnvConfig, ExperimentConfig};
use crate::{Axis, Common, UsageError};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Context {
    pub fn load(common: &Common) -> anyhow::Result<Self> {
        let path = common
            .config
            .as_ref()
            .ok_or_else(|| UsageError("--config <PATH> is required".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &common.out {
            cfg.output_dir = out.clone();
        }
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            out,
        })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    /// `payload` with the config hash and seed attached.
    fn stamp(&self, payload: impl Serialize) -> anyhow::Result<Value> {
        let mut v = serde_json::to_value(payload)?;
        let map = v.as_object_mut().context("artifact payload must be a JSON object")?;
        map.insert("config_hash".into(), json!(self.hash));
        map.insert("seed".into(), json!(self.seed()));
        Ok(v)
    }

    fn write_json(&self, name: &str, payload: impl Serialize) -> anyhow::Result<PathBuf> {
        let path = self.out.join(name);
        let mut text = serde_json::to_string_pretty(&self.stamp(payload)?)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn log(&self, name: &str, line: &str) -> anyhow::Result<()> {
        let unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.out.join(name))?;
        writeln!(f, "[unix {unix}] {line}")?;
        Ok(())
    }

    fn dataset_path(&self) -> PathBuf {
        self.out.join("dataset.csv")
    }

    fn checkpoint_path(&self, method: Method) -> PathBuf {
        self.out.join(method.as_str()).join("checkpoint.json")
    }

    fn load_dataset(&self) -> anyhow::Result<Dataset> {
        let path = self.dataset_path();
        require(&path, "run `lvr generate` first")?;
        let sidecar = self.out.join("dataset.json");
        if let Ok(text) = fs::read_to_string(&sidecar) {
            let meta: Value = serde_json::from_str(&text)?;
            if meta.get("config_hash").and_then(Value::as_str) != Some(self.hash.as_str()) {
                eprintln!("warning: {} was generated with a different config", path.display());
            }
        }
        Ok(Dataset::read_csv(&path, "demonstrations")?)
    }

    fn load_checkpoint(&self, path: &Path) -> anyhow::Result<Checkpoint> {
        require(path, "run `lvr train` first")?;
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if ckpt.config_hash != self.hash {
            eprintln!("warning: {} was trained with a different config", path.display());
        }
        Ok(ckpt)
    }
}

fn require(path: &Path, hint: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("missing prerequisite {} ({hint})", path.display())).into())
    }
}

pub enum Setup {
    Hopper(HopperSetup),
    SmoothCycle { env: SmoothCycleEnv, expert: SmoothCycleExpert },
}

impl Setup {
    pub fn from_config(cfg: &EnvConfig) -> anyhow::Result<Self> {
        Ok(match cfg {
            EnvConfig::Hopper { params, expert_gain } => Setup::Hopper(hopper_setup(params.clone(), *expert_gain)?),
            EnvConfig::SmoothCycle { params } => {
                let env = SmoothCycleEnv::new(params.clone())?;
                let expert = SmoothCycleExpert::new(&env)?;
                Setup::SmoothCycle { env, expert }
            }
        })
    }
}

/// Binds `$env`, `$expert` and `$start` (demo start state) for either
/// environment and evaluates `$body` with them.
macro_rules! with_setup {
    ($setup:expr, |$env:ident, $expert:ident, $start:ident| $body:expr) => {
        match $setup {
            Setup::Hopper(s) => {
                let $env = &s.env;
                let $expert = &s.expert;
                let $start = s.start;
                $body
            }
            Setup::SmoothCycle { env, expert } => {
                let $env = env;
                let $expert = expert;
                let $start = env.nominal_state();
                $body
            }
        }
    };
}

fn check_dims<E: Environment>(ckpt: &Checkpoint, env: &E) -> anyhow::Result<()> {
    let (s, a) = (ckpt.policy.state_dim(), ckpt.policy.action_dim());
    if s != env.obs_dim() || a != env.action_dim() {
        return Err(UsageError(format!(
            "checkpoint maps states of dim {s} to actions of dim {a}, but {} expects {} -> {}",
            env.name(),
            env.obs_dim(),
            env.action_dim()
        ))
        .into());
    }
    Ok(())
}

pub fn generate(ctx: &Context) -> anyhow::Result<()> {
    let setup = Setup::from_config(&ctx.cfg.env)?;
    let d = &ctx.cfg.data;
    with_setup!(&setup, |env, expert, start| {
        let (data, traj) = generate_demos_traced(env, expert, start, d.steps, d.noise_std, ctx.seed())?;
        data.write_csv(&ctx.dataset_path())?;
        ctx.write_json(
            "dataset.json",
            json!({
                "env": env.name(),
                "samples": data.len(),
                "state_dim": data.state_dim(),
                "action_dim": data.action_dim(),
                "dt": data.dt,
                "noise_std": d.noise_std,
                "section_crossings": traj.section_hits.len(),
                "crossings": traj.section_hits,
            }),
        )?;
        println!(
            "{}: {} samples, {} section crossings -> {}",
            env.name(),
            data.len(),
            traj.section_hits.len(),
            ctx.dataset_path().display()
        );
    });
    Ok(())
}

pub fn train(ctx: &Context, method: Method) -> anyhow::Result<()> {
    let data = ctx.load_dataset()?;
    let mut cfg = ctx.cfg.train_config();
    if method == Method::Bc {
        cfg = cfg.behavior_cloning();
    }
    let res = lvr_core::train(&data, &cfg, |epoch, r| {
        eprintln!("[{}] epoch {epoch}: l_bc {:.6e} l_kl {:.6e} total {:.6e}", method.as_str(), r.l_bc, r.l_kl, r.total);
    })?;

    let dir = ctx.out.join(method.as_str());
    fs::create_dir_all(&dir)?;
    Checkpoint::new(res.policy.clone(), ctx.hash.clone(), ctx.seed(), method.as_str())
        .save(&ctx.checkpoint_path(method))?;

    let mut w = csv::Writer::from_path(dir.join("loss_history.csv"))?;
    w.write_record(["epoch", "l_bc", "l_kl", "total", "degenerate_edges", "config_hash", "seed"])?;
    for (epoch, r) in res.history.iter().enumerate() {
        w.write_record([
            epoch.to_string(),
            format!("{}", r.l_bc),
            format!("{}", r.l_kl),
            format!("{}", r.total),
            r.degenerate_edges.to_string(),
            ctx.hash.clone(),
            ctx.seed().to_string(),
        ])?;
    }
    w.flush()?;

    let name = method.as_str();
    ctx.write_json(&format!("{name}/graph.json"), json!({ "graph": res.graph.diagnostic_json() }))?;
    let best = res.best_report();
    ctx.write_json(
        &format!("{name}/train.json"),
        json!({
            "method": name,
            "lambda": cfg.loss.lambda,
            "epochs_run": res.history.len(),
            "best_epoch": res.best_epoch,
            "initial": res.history.first(),
            "best": best,
            "final": res.history.last(),
            "num_params": res.policy.net.num_params(),
        }),
    )?;
    ctx.log(
        &format!("{name}/train.log"),
        &format!("trained {name}: {} epochs in {:.3} s", res.history.len(), res.wall_seconds),
    )?;
    println!(
        "{name}: best epoch {} l_bc {:.6e} l_kl {:.6e} -> {}",
        res.best_epoch,
        best.l_bc,
        best.l_kl,
        ctx.checkpoint_path(method).display()
    );
    Ok(())
}

pub fn eval(ctx: &Context, checkpoint: Option<PathBuf>, method: Option<Method>) -> anyhow::Result<()> {
    let ckpt = match (checkpoint, method) {
        (Some(path), _) => Some(ctx.load_checkpoint(&path)?),
        (None, Some(Method::Expert)) => None,
        (None, Some(m)) => Some(ctx.load_checkpoint(&ctx.checkpoint_path(m))?),
        (None, None) => return Err(UsageError("eval needs --checkpoint or --method".into()).into()),
    };
    let label = ckpt.as_ref().map_or("expert".to_string(), |c| c.method.clone());
    let e = &ctx.cfg.eval;
    let setup = Setup::from_config(&ctx.cfg.env)?;
    let metrics = with_setup!(&setup, |env, expert, _start| {
        let ctrl: &dyn Controller = match &ckpt {
            Some(c) => {
                check_dims(c, env)?;
                &c.policy
            }
            None => expert,
        };
        evaluate_controller(ctrl, env, e.episodes, e.horizon, eval_seed(ctx.seed()))
    });
    let path = ctx.write_json(&format!("eval_{label}.json"), json!({ "method": label, "metrics": metrics }))?;
    println!(
        "{label}: survival {:.1} +- {:.1} steps ({:.0}% reach {}), tracking return {:.2} -> {}",
        metrics.mean_survival,
        metrics.std_survival,
        100.0 * metrics.survival_fraction,
        metrics.horizon,
        metrics.mean_return,
        path.display()
    );
    Ok(())
}

/// Section coordinates of the expert's first crossing from the demo start.
fn section_start<E: Environment>(env: &E, expert: &dyn Controller, start: E::State) -> anyhow::Result<Vec<f64>> {
    let quiet = env.with_noise(0.0);
    let mut rng = rng_for(0, streams::ANALYSIS);
    let traj = rollout(&quiet, start, expert, 5000, &mut rng);
    traj.section_hits
        .into_iter()
        .next()
        .ok_or_else(|| anyhow::anyhow!("expert never crossed the section of {}", env.name()))
}

pub fn poincare(ctx: &Context, method: Method) -> anyhow::Result<()> {
    let ckpt = match method {
        Method::Expert => None,
        m => Some(ctx.load_checkpoint(&ctx.checkpoint_path(m))?),
    };
    let setup = Setup::from_config(&ctx.cfg.env)?;
    let analysis = with_setup!(&setup, |env, expert, start| {
        let x0 = section_start(env, expert, start)?;
        let ctrl: &dyn Controller = match &ckpt {
            Some(c) => {
                check_dims(c, env)?;
                &c.policy
            }
            None => expert,
        };
        estimate_return_map(env, ctrl, &x0, &ctx.cfg.analysis.poincare, ctx.seed())?
    });
    let name = method.as_str();
    let path = ctx.write_json(&format!("poincare_{name}.json"), json!({ "method": name, "analysis": analysis }))?;
    println!(
        "{name}: {:?}, spectral radius {:.4}, residual {:.2e} -> {}",
        analysis.verdict,
        analysis.spectral_radius,
        analysis.residual,
        path.display()
    );
    Ok(())
}

pub fn latent(ctx: &Context, method: Method) -> anyhow::Result<()> {
    let data = ctx.load_dataset()?;
    let ckpt = ctx.load_checkpoint(&ctx.checkpoint_path(method))?;
    let setup = Setup::from_config(&ctx.cfg.env)?;
    let labels: Vec<usize> = with_setup!(&setup, |env, _expert, _start| {
        check_dims(&ckpt, env)?;
        data.states.rows().into_iter().map(|r| env.mode_label(&r.to_vec())).collect()
    });
    let report = latent_geometry(&ckpt.policy, &data, Some(&labels))?;
    let name = method.as_str();
    let path = ctx.write_json(&format!("latent_{name}.json"), json!({ "method": name, "report": report }))?;
    println!(
        "{name}: PC1 explains {:.3} of latent-difference variance, bundle separation {} -> {}",
        report.pc1_ratio(),
        report.bundle_separation.map_or("n/a".into(), |b| format!("{b:.3}")),
        path.display()
    );
    Ok(())
}

pub fn sweep(ctx: &Context, axis: Axis) -> anyhow::Result<()> {
    let a = &ctx.cfg.analysis;
    if axis == Axis::Size && a.sizes.iter().any(|&s| s < 2 || s > ctx.cfg.data.steps) {
        return Err(UsageError(format!(
            "analysis.sizes must lie in [2, data.steps = {}], got {:?}",
            ctx.cfg.data.steps, a.sizes
        ))
        .into());
    }
    let settings = SweepSettings {
        train: ctx.cfg.train_config(),
        episodes: ctx.cfg.eval.episodes,
        horizon: ctx.cfg.eval.horizon,
        demo_noise: ctx.cfg.data.noise_std,
        demo_steps: ctx.cfg.data.steps,
    };
    let setup = Setup::from_config(&ctx.cfg.env)?;
    let result: SweepResult = with_setup!(&setup, |env, expert, start| match axis {
        Axis::Size => data_efficiency_sweep(env, expert, &start, &a.sizes, &a.methods, &a.seeds, &settings),
        Axis::Perturbation => robustness_sweep(env, expert, &start, &a.levels, &a.methods, &a.seeds, &settings),
    });
    let stem = format!("sweep_{}", result.axis.as_str());
    let csv_path = ctx.out.join(format!("{stem}.csv"));
    result.write_csv(fs::File::create(&csv_path)?)?;
    ctx.write_json(
        &format!("{stem}.json"),
        json!({ "axis": result.axis, "seeds": result.seeds, "summary": result.summary(), "cells": result.cells }),
    )?;
    for row in result.summary() {
        println!(
            "{} {:>8} {:>6}: survival {:.1} +- {:.1}, return {:.2} +- {:.2} ({} failed of {})",
            result.axis.as_str(),
            row.value,
            row.method.as_str(),
            row.mean_survival,
            row.std_survival,
            row.mean_return,
            row.std_return,
            row.failed_runs,
            row.runs
        );
    }
    println!("-> {}", csv_path.display());
    Ok(())
}
