//! Ready-made setups shared by the command-line tool, tests and benches.

use crate::envs::{settle_on_cycle, HopperExpert, HopperParams, HopperState, HybridHopperEnv};
use crate::error::Result;
use crate::loss::ProjectionMode;
use crate::trainer::TrainConfig;

pub const DEFAULT_HOPPER_GAIN: f64 = 20.0;

/// Hopper, its expert and an apex state on the expert's limit cycle.
#[derive(Debug, Clone)]
pub struct HopperSetup {
    pub env: HybridHopperEnv,
    pub expert: HopperExpert,
    pub start: HopperState,
}

pub fn hopper_setup(params: HopperParams, gain: f64) -> Result<HopperSetup> {
    let env = HybridHopperEnv::new(params)?;
    let expert = HopperExpert::new(&env, gain)?;
    let (guess, _) = expert.predicted_return_slope()?;
    let apex = settle_on_cycle(&env, &expert, &[guess], 500, 1e-12)?;
    Ok(HopperSetup {
        start: HopperState::apex(apex[0]),
        env,
        expert,
    })
}

/// Training settings used for the scalar-action experiments: the readout
/// of a 1-D action has rank one, so chords are compared unprojected.
pub fn scalar_action_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        hidden: vec![32, 32, 32],
        learning_rate: 1e-2,
        seed,
        ..Default::default()
    };
    cfg.loss.projection = ProjectionMode::Identity;
    cfg
}
