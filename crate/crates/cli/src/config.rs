//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use lvr_core::presets::DEFAULT_HOPPER_GAIN;
use lvr_core::{
    GraphConfig, HopperParams, LossConfig, Method, Optimizer, PoincareConfig, SmoothCycleParams, TrainConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

fn default_gain() -> f64 {
    DEFAULT_HOPPER_GAIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Hopper {
        #[serde(default)]
        params: HopperParams,
        #[serde(default = "default_gain")]
        expert_gain: f64,
    },
    SmoothCycle {
        #[serde(default)]
        params: SmoothCycleParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub steps: usize,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { steps: 250, noise_std: 0.02 }
    }
}

/// Optimizer and network settings; loss and graph live in their own blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hidden: Vec<usize>,
    pub log_every: usize,
    pub early_stop_patience: Option<usize>,
    pub early_stop_tol: f64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            hidden: t.hidden,
            log_every: 100,
            early_stop_patience: t.early_stop_patience,
            early_stop_tol: t.early_stop_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, horizon: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Dataset sizes for the data-efficiency sweep.
    pub sizes: Vec<usize>,
    /// Perturbation levels for the robustness sweep.
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub poincare: PoincareConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sizes: vec![50, 100, 250],
            levels: vec![0.0, 0.05, 0.1],
            seeds: vec![0, 1, 2],
            methods: vec![Method::Expert, Method::Bc, Method::Lvr],
            poincare: PoincareConfig::default(),
        }
    }
}

/// One file fully determines one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; data, init and evaluation streams are split from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = |msg: String| anyhow::Error::new(UsageError(msg));
        match &self.env {
            EnvConfig::Hopper { params, expert_gain } => {
                params.validate().map_err(|e| bad(format!("env.params: {e}")))?;
                if !(*expert_gain > 0.0) {
                    return Err(bad(format!("env.expert_gain must be positive, got {expert_gain}")));
                }
            }
            EnvConfig::SmoothCycle { params } => params.validate().map_err(|e| bad(format!("env.params: {e}")))?,
        }
        if self.data.steps < 2 {
            return Err(bad(format!("data.steps must be at least 2, got {}", self.data.steps)));
        }
        if !(self.data.noise_std >= 0.0) {
            return Err(bad(format!("data.noise_std must be non-negative, got {}", self.data.noise_std)));
        }
        self.train_config().validate().map_err(|e| bad(e.to_string()))?;
        if self.eval.episodes == 0 || self.eval.horizon == 0 {
            return Err(bad("eval.episodes and eval.horizon must be positive".into()));
        }
        if self.analysis.seeds.is_empty() || self.analysis.methods.is_empty() {
            return Err(bad("analysis.seeds and analysis.methods must not be empty".into()));
        }
        Ok(())
    }

    /// Trainer settings for the given method at the root seed.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: self.seed,
            hidden: t.hidden.clone(),
            loss: self.loss,
            graph: self.graph,
            log_every: t.log_every,
            early_stop_patience: t.early_stop_patience,
            early_stop_tol: t.early_stop_tol,
        }
    }

    /// SHA-256 of the canonical JSON form of everything except the output
    /// directory, so identical experiments hash alike wherever they run.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }
}

/// JSON with object keys sorted recursively.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn sort(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&map[k]));
                }
                serde_json::Value::Object(out)
            }
            serde_json::Value::Array(xs) => serde_json::Value::Array(xs.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(value).to_string()
}
