//! Built-in dynamical systems with analytic experts.
//!
//! * [`hopper`]: 1-D spring-mass hopper with flight/stance modes, guard
//!   detection by bisection and a touchdown velocity reset.
//! * [`smooth_cycle`]: controlled Van der Pol oscillator tracked by a
//!   time-varying LQR expert along its limit cycle.
//! * [`lqr`]: Riccati utilities and the synthetic gain-regression experiment.

pub mod hopper;
pub mod lqr;
pub mod smooth_cycle;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LvrError, Result};
use crate::policy::Policy;

pub use hopper::{HopperExpert, HopperParams, HopperState, HybridHopperEnv, Mode};
pub use lqr::{LqrSyntheticEnv, RegressionTable};
pub use smooth_cycle::{SmoothCycleEnv, SmoothCycleExpert, SmoothCycleParams};

/// Anything that maps an observation to an action.
pub trait Controller: Sync {
    fn act(&self, obs: &[f64]) -> Vec<f64>;
}

impl Controller for Policy {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        self.action(ndarray::ArrayView1::from(obs))
            .map(|a| a.to_vec())
            .unwrap_or_else(|_| vec![f64::NAN; self.action_dim()])
    }
}

/// Outputs zeros of a fixed dimension.
#[derive(Debug, Clone, Copy)]
pub struct ZeroController(pub usize);

impl Controller for ZeroController {
    fn act(&self, _obs: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

impl<F> Controller for F
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        self(obs)
    }
}

/// Result of advancing one control period.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Action applied at the start of the period (the one recorded in demos).
    pub action: Vec<f64>,
    /// Reduced coordinates of every Poincare-section crossing in the period.
    pub section_hits: Vec<Vec<f64>>,
    pub reward: f64,
    /// `Some(reason)` once the system left its safe set.
    pub fallen: Option<String>,
}

/// A closed-loop simulation target with a Poincare section.
pub trait Environment: Clone + Sync + Send {
    type State: Clone + Send + Sync + std::fmt::Debug;

    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn control_dt(&self) -> f64;

    /// A state on the nominal section, used as the default demo start.
    fn nominal_state(&self) -> Self::State;
    /// Randomized initial condition for evaluation episodes.
    fn perturbed_state(&self, rng: &mut ChaCha8Rng) -> Self::State;
    fn observe(&self, s: &Self::State) -> Vec<f64>;
    /// Environment-provided mode label of an observation.
    fn mode_label(&self, obs: &[f64]) -> usize;

    /// Advance one control period under `ctrl`. The controller is queried at
    /// the start of the period and again after every hybrid event.
    fn step(&self, s: &mut Self::State, ctrl: &dyn Controller, rng: &mut ChaCha8Rng) -> StepInfo;

    /// Dimension of the reduced section coordinates.
    fn section_dim(&self) -> usize;
    /// Full state on the section for given reduced coordinates.
    fn lift_section(&self, coords: &[f64]) -> Self::State;

    /// Copy with per-step process noise of the given standard deviation.
    fn with_noise(&self, std: f64) -> Self;
    /// Copy with the environment's perturbation axis set to `level`.
    fn with_perturbation(&self, level: f64) -> Self;
}

/// Deterministic per-purpose RNG derived from a root seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known RNG streams split from a root seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const ANALYSIS: u64 = 4;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub section_hits: Vec<Vec<f64>>,
    /// Control periods completed before falling (or the horizon).
    pub survived: usize,
    pub fallen: Option<String>,
}

/// Runs `steps` control periods from `start`.
pub fn rollout<E: Environment>(
    env: &E,
    start: E::State,
    ctrl: &dyn Controller,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let mut s = start;
    let mut traj = Trajectory {
        observations: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        section_hits: Vec::new(),
        survived: 0,
        fallen: None,
    };
    for _ in 0..steps {
        let obs = env.observe(&s);
        let info = env.step(&mut s, ctrl, rng);
        traj.observations.push(obs);
        traj.actions.push(info.action);
        traj.section_hits.extend(info.section_hits);
        if let Some(reason) = info.fallen {
            traj.fallen = Some(reason);
            break;
        }
        traj.rewards.push(info.reward);
        traj.survived += 1;
    }
    traj
}

/// Closed-loop expert rollout recorded at the control rate.
///
/// Fails if the expert leaves the safe set before `n_steps` periods.
pub fn generate_demos<E: Environment>(
    env: &E,
    expert: &dyn Controller,
    start: E::State,
    n_steps: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    Ok(generate_demos_traced(env, expert, start, n_steps, noise_std, seed)?.0)
}

/// [`generate_demos`] that also returns the underlying trajectory.
pub fn generate_demos_traced<E: Environment>(
    env: &E,
    expert: &dyn Controller,
    start: E::State,
    n_steps: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, Trajectory)> {
    if n_steps == 0 {
        return Err(LvrError::invalid_parameter("demo length must be positive"));
    }
    if !(noise_std >= 0.0) {
        return Err(LvrError::invalid_parameter("demo noise must be non-negative"));
    }
    let noisy = env.with_noise(noise_std);
    let mut rng = rng_for(seed, streams::DATA);
    let traj = rollout(&noisy, start, expert, n_steps, &mut rng);
    if let Some(reason) = &traj.fallen {
        return Err(LvrError::RolloutFailed {
            steps: traj.survived,
            reason: format!("expert demonstration failed: {reason}"),
        });
    }
    let states = Array2::from_shape_fn((n_steps, env.obs_dim()), |(i, j)| traj.observations[i][j]);
    let actions = Array2::from_shape_fn((n_steps, env.action_dim()), |(i, j)| traj.actions[i][j]);
    let data = Dataset::new(states, actions, env.control_dt(), format!("{}/expert", env.name()))?;
    Ok((data, traj))
}

/// Reduced coordinates of the first section crossing reached from the
/// section state `coords`, or `None` if the system falls or no crossing
/// happens within `max_steps` periods.
pub fn return_to_section<E: Environment>(
    env: &E,
    coords: &[f64],
    ctrl: &dyn Controller,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    let mut s = env.lift_section(coords);
    for _ in 0..max_steps {
        let info = env.step(&mut s, ctrl, rng);
        if info.fallen.is_some() {
            return None;
        }
        if let Some(hit) = info.section_hits.into_iter().next() {
            return Some(hit);
        }
    }
    None
}

/// Iterates the section return map from `coords` until successive crossings
/// agree within `tol`, returning the settled coordinates.
pub fn settle_on_cycle<E: Environment>(
    env: &E,
    ctrl: &dyn Controller,
    coords: &[f64],
    max_returns: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let mut rng = rng_for(0, streams::ANALYSIS);
    let quiet = env.with_noise(0.0);
    let mut x = coords.to_vec();
    for _ in 0..max_returns {
        let next = return_to_section(&quiet, &x, ctrl, 10_000, &mut rng).ok_or_else(|| LvrError::RolloutFailed {
            steps: 0,
            reason: "closed loop left the safe set while settling on the cycle".into(),
        })?;
        let gap = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if gap < tol {
            return Ok(x);
        }
    }
    Err(LvrError::numerical(format!("no convergence to a cycle within {max_returns} returns")))
}
