//! Latent variation regularization (LVR) for imitation learning from small
//! demonstration sets.
//!
//! A policy is an MLP feature map `phi` followed by a linear readout `W`.
//! Besides behavior cloning, LVR aligns the orientation of latent chords
//! `phi(x_j) - phi(x_i)` across a kNN graph of demonstration states with the
//! orientation of the expert's action differences, measured as a KL
//! divergence between temperature softmaxes of cosine similarities.
//!
//! The crate also ships the systems used to study it: a hybrid 1-D hopper
//! and a Van der Pol oscillator, both with analytic experts, a synthetic LQR
//! gain-regression experiment, Poincare return-map analysis and PCA of
//! latent differences.

pub mod analysis;
pub mod data;
pub mod envs;
pub mod error;
pub mod graph;
pub mod loss;
pub mod numerics;
pub mod policy;
pub mod presets;
pub mod trainer;

pub use error::{LvrError, Result};

pub use analysis::{
    data_efficiency_sweep, estimate_return_map, latent_geometry, robustness_sweep, LatentGeometryReport, Method,
    PoincareAnalysis, PoincareConfig, SweepResult, SweepSettings, Verdict,
};
pub use data::Dataset;
pub use envs::{
    generate_demos, Controller, Environment, HopperExpert, HopperParams, HybridHopperEnv, LqrSyntheticEnv,
    SmoothCycleEnv, SmoothCycleExpert, SmoothCycleParams,
};
pub use graph::{GraphConfig, KnnGraph};
pub use loss::{LossConfig, LossReport, LvrObjective, ProjectionMode};
pub use policy::{Checkpoint, Policy, PolicyNet};
pub use trainer::{evaluate_checkpoint, train, Optimizer, RolloutMetrics, TrainConfig, TrainResult};
