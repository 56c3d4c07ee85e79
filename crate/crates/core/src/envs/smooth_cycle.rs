//! Controlled Van der Pol oscillator tracked along its limit cycle.

use std::sync::Arc;

use ndarray::{array, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lqr::riccati_sweep;
use super::{Controller, Environment, StepInfo};
use crate::error::{LvrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothCycleParams {
    pub mu: f64,
    /// Added to `mu` in the simulated dynamics only (robustness axis).
    pub mu_shift: f64,
    pub max_control: f64,
    pub dt: f64,
    pub substeps: usize,
    pub noise_std: f64,
    /// Episode fails once the state norm exceeds this.
    pub max_norm: f64,
    /// Backward Riccati passes over the cycle before the gains are frozen.
    pub riccati_periods: usize,
}

impl Default for SmoothCycleParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            mu_shift: 0.0,
            max_control: 5.0,
            dt: 0.02,
            substeps: 10,
            noise_std: 0.0,
            max_norm: 6.0,
            riccati_periods: 8,
        }
    }
}

impl SmoothCycleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(LvrError::config(format!("smooth_cycle.mu must be non-negative, got {}", self.mu)));
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(LvrError::config("smooth_cycle.dt and substeps must be positive"));
        }
        if !(self.max_control > 0.0 && self.max_norm > 0.0) || self.noise_std < 0.0 {
            return Err(LvrError::config("smooth_cycle bounds must be positive and noise non-negative"));
        }
        if self.riccati_periods == 0 {
            return Err(LvrError::config("smooth_cycle.riccati_periods must be at least 1"));
        }
        Ok(())
    }
}

/// One period of the uncontrolled limit cycle, starting on the section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalCycle {
    pub states: Vec<[f64; 2]>,
    pub period: f64,
    /// Gap between the table start and the state one period later.
    pub closure_gap: f64,
}

impl NominalCycle {
    pub fn step(&self) -> f64 {
        self.period / self.states.len() as f64
    }

    /// Index and distance of the closest table point.
    pub fn nearest(&self, x: [f64; 2]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.states.iter().enumerate() {
            let d = (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothCycleEnv {
    pub params: SmoothCycleParams,
    pub cycle: Arc<NominalCycle>,
}

fn field(mu: f64, x: [f64; 2], u: f64) -> [f64; 2] {
    [x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u]
}

fn rk4(mu: f64, x: [f64; 2], u: f64, h: f64) -> [f64; 2] {
    let add = |a: [f64; 2], k: [f64; 2], s: f64| [a[0] + s * k[0], a[1] + s * k[1]];
    let k1 = field(mu, x, u);
    let k2 = field(mu, add(x, k1, h / 2.0), u);
    let k3 = field(mu, add(x, k2, h / 2.0), u);
    let k4 = field(mu, add(x, k3, h), u);
    [
        x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Integrates for at most `h`, stopping at an upward crossing of `x0 = 0`.
/// The returned state is on the `x0 >= 0` side, within 1e-10 of the section.
fn substep(mu: f64, x: [f64; 2], u: f64, h: f64) -> ([f64; 2], f64, bool) {
    let end = rk4(mu, x, u, h);
    if !(x[0] < 0.0 && end[0] >= 0.0) {
        return (end, h, false);
    }
    let (mut lo, mut hi, mut at_hi) = (0.0, h, end);
    for _ in 0..200 {
        if at_hi[0].abs() < 1e-10 || hi - lo < 1e-16 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let at_mid = rk4(mu, x, u, mid);
        if at_mid[0] >= 0.0 {
            hi = mid;
            at_hi = at_mid;
        } else {
            lo = mid;
        }
    }
    (at_hi, hi, true)
}

/// Long uncontrolled run from `(2, 0)`, then one period sampled at `h`.
pub fn nominal_cycle(mu: f64, h: f64) -> Result<NominalCycle> {
    let mut x = [2.0, 0.0];
    let mut t = 0.0;
    let mut crossings: Vec<(f64, [f64; 2])> = Vec::new();
    while t < 200.0 && crossings.len() < 40 {
        let (next, used, hit) = substep(mu, x, 0.0, h);
        x = next;
        t += used;
        if hit {
            crossings.push((t, x));
        }
    }
    if crossings.len() < 3 {
        return Err(LvrError::numerical("no limit cycle found for the smooth-cycle system"));
    }
    let (t1, start) = crossings[crossings.len() - 2];
    let (t2, _) = crossings[crossings.len() - 1];
    let period = t2 - t1;
    let n = (period / h).round().max(8.0) as usize;
    let hs = period / n as f64;
    let mut states = Vec::with_capacity(n);
    let mut y = start;
    for _ in 0..n {
        states.push(y);
        y = rk4(mu, y, 0.0, hs);
    }
    let closure_gap = ((y[0] - start[0]).powi(2) + (y[1] - start[1]).powi(2)).sqrt();
    if closure_gap > 1e-3 {
        return Err(LvrError::numerical(format!("nominal cycle does not close (gap {closure_gap:.2e})")));
    }
    Ok(NominalCycle {
        states,
        period,
        closure_gap,
    })
}

impl SmoothCycleEnv {
    pub fn new(params: SmoothCycleParams) -> Result<Self> {
        params.validate()?;
        let cycle = nominal_cycle(params.mu, params.dt / params.substeps as f64)?;
        Ok(Self {
            params,
            cycle: Arc::new(cycle),
        })
    }

    fn mu_sim(&self) -> f64 {
        self.params.mu + self.params.mu_shift
    }

    /// Integrates `duration` seconds under a constant input.
    pub fn integrate_fixed(&self, x: [f64; 2], u: f64, duration: f64) -> [f64; 2] {
        let h = self.params.dt / self.params.substeps as f64;
        let mut x = x;
        let mut remaining = duration;
        while remaining > 1e-15 {
            let (next, used, _) = substep(self.mu_sim(), x, u, h.min(remaining));
            x = next;
            remaining -= used;
        }
        x
    }

    fn clamp(&self, u: f64) -> f64 {
        if u.is_nan() {
            return u;
        }
        u.clamp(-self.params.max_control, self.params.max_control)
    }
}

impl Environment for SmoothCycleEnv {
    type State = [f64; 2];

    fn name(&self) -> &'static str {
        "smooth_cycle"
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn control_dt(&self) -> f64 {
        self.params.dt
    }

    fn nominal_state(&self) -> [f64; 2] {
        self.cycle.states[0]
    }

    fn perturbed_state(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let i = rng.gen_range(0..self.cycle.states.len());
        let p = self.cycle.states[i];
        [p[0] + rng.gen_range(-0.3..0.3), p[1] + rng.gen_range(-0.3..0.3)]
    }

    fn observe(&self, s: &[f64; 2]) -> Vec<f64> {
        s.to_vec()
    }

    fn mode_label(&self, obs: &[f64]) -> usize {
        usize::from(obs[1] < 0.0)
    }

    fn step(&self, s: &mut [f64; 2], ctrl: &dyn Controller, rng: &mut ChaCha8Rng) -> StepInfo {
        let p = &self.params;
        let h = p.dt / p.substeps as f64;
        let mut u = self.clamp(ctrl.act(s)[0]);
        let mut info = StepInfo {
            action: vec![u],
            section_hits: Vec::new(),
            reward: 0.0,
            fallen: None,
        };
        let mut remaining = p.dt;
        while remaining > 1e-12 {
            if !u.is_finite() {
                info.fallen = Some("non-finite action".into());
                return info;
            }
            let (next, used, hit) = substep(self.mu_sim(), *s, u, h.min(remaining));
            *s = next;
            remaining -= used;
            if hit {
                info.section_hits.push(vec![s[1]]);
                u = self.clamp(ctrl.act(s)[0]);
            }
        }
        if p.noise_std > 0.0 {
            let kick: f64 = StandardNormal.sample(rng);
            s[1] += p.noise_std * kick;
        }
        let norm = s[0].hypot(s[1]);
        if !norm.is_finite() || norm > p.max_norm {
            info.fallen = Some(format!("state norm {norm:.3} exceeds {}", p.max_norm));
            return info;
        }
        let (_, d) = self.cycle.nearest(*s);
        info.reward = (-(d / 0.1).powi(2)).exp();
        info
    }

    fn section_dim(&self) -> usize {
        1
    }

    fn lift_section(&self, coords: &[f64]) -> [f64; 2] {
        [0.0, coords[0]]
    }

    fn with_noise(&self, std: f64) -> Self {
        let mut e = self.clone();
        e.params.noise_std = std;
        e
    }

    fn with_perturbation(&self, level: f64) -> Self {
        let mut e = self.clone();
        e.params.mu_shift = level;
        e
    }
}

/// Time-varying LQR along the nominal cycle; the phase is taken from the
/// closest table point.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothCycleExpert {
    pub cycle: Arc<NominalCycle>,
    /// One `[k0, k1]` row per table point.
    pub gains: Vec<[f64; 2]>,
    pub max_control: f64,
}

impl SmoothCycleExpert {
    /// Backward Riccati sweep with `Q = I`, `R = I` on the linearization
    /// along the cycle, repeated until the gains are periodic.
    pub fn new(env: &SmoothCycleEnv) -> Result<Self> {
        let mu = env.params.mu;
        let cycle = &env.cycle;
        let h = cycle.step();
        let n = cycle.states.len();
        let mut a_seq = Vec::with_capacity(n);
        let mut b_seq = Vec::with_capacity(n);
        for x in &cycle.states {
            let a = array![[0.0, 1.0], [-2.0 * mu * x[0] * x[1] - 1.0, mu * (1.0 - x[0] * x[0])]];
            let b = array![[0.0], [1.0]];
            let ad = Array2::eye(2) + &a * h + a.dot(&a) * (h * h / 2.0);
            let bd = &b * h + a.dot(&b) * (h * h / 2.0);
            a_seq.push(ad);
            b_seq.push(bd);
        }
        let q = Array2::eye(2) * h;
        let r = Array2::eye(1) * h;
        let mut terminal = Array2::eye(2);
        let mut gains = Vec::new();
        for _ in 0..env.params.riccati_periods {
            let (k, p0) = riccati_sweep(&a_seq, &b_seq, &q, &r, &terminal)?;
            gains = k;
            terminal = p0;
        }
        let gains = gains.iter().map(|k| [k[[0, 0]], k[[0, 1]]]).collect();
        Ok(Self {
            cycle: env.cycle.clone(),
            gains,
            max_control: env.params.max_control,
        })
    }
}

impl Controller for SmoothCycleExpert {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        let x = [obs[0], obs[1]];
        let (i, _) = self.cycle.nearest(x);
        let r = self.cycle.states[i];
        let k = self.gains[i];
        let u = -(k[0] * (x[0] - r[0]) + k[1] * (x[1] - r[1]));
        vec![u.clamp(-self.max_control, self.max_control)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_demos, rng_for, rollout, ZeroController};

    #[test]
    fn zero_damping_is_a_harmonic_oscillator() {
        let params = SmoothCycleParams {
            mu: 0.0,
            ..Default::default()
        };
        // The table is irrelevant here; build the env directly.
        let env = SmoothCycleEnv {
            params,
            cycle: Arc::new(NominalCycle {
                states: vec![[0.0, 1.0]],
                period: 1.0,
                closure_gap: 0.0,
            }),
        };
        let x0: [f64; 2] = [1.3, -0.4];
        let r0 = x0[0].hypot(x0[1]);
        let x = env.integrate_fixed(x0, 0.0, 2.0 * std::f64::consts::PI);
        assert!((x[0].hypot(x[1]) - r0).abs() < 1e-6);
        assert!((x[0] - x0[0]).abs() < 1e-6 && (x[1] - x0[1]).abs() < 1e-6);
    }

    #[test]
    fn nominal_cycle_closes_and_has_known_period() {
        let env = SmoothCycleEnv::new(SmoothCycleParams::default()).unwrap();
        assert!(env.cycle.closure_gap < 1e-3);
        // Van der Pol period at mu = 1 is 6.6633...
        assert!((env.cycle.period - 6.6633).abs() < 1e-3, "{}", env.cycle.period);
        assert!(env.cycle.states[0][0].abs() < 1e-9);
    }

    #[test]
    fn expert_reproduces_cycle_and_rejects_perturbations() {
        let env = SmoothCycleEnv::new(SmoothCycleParams::default()).unwrap();
        let expert = SmoothCycleExpert::new(&env).unwrap();
        let mut rng = rng_for(0, 0);
        let t = rollout(&env, env.nominal_state(), &expert, 400, &mut rng);
        assert!(t.fallen.is_none());
        let max_u = t.actions.iter().map(|a| a[0].abs()).fold(0.0, f64::max);
        assert!(max_u < 1e-2, "{max_u}");
        let mut rng = rng_for(1, 0);
        for _ in 0..5 {
            let start = env.perturbed_state(&mut rng);
            let t = rollout(&env, start, &expert, 500, &mut rng);
            assert_eq!(t.survived, 500);
            let mut end = start;
            let mut r2 = rng_for(9, 0);
            for _ in 0..500 {
                env.step(&mut end, &expert, &mut r2);
            }
            assert!(env.cycle.nearest(end).1 < 1e-2);
        }
    }

    #[test]
    fn noiseless_demo_repeats_each_period() {
        let env = SmoothCycleEnv::new(SmoothCycleParams::default()).unwrap();
        let expert = SmoothCycleExpert::new(&env).unwrap();
        let data = generate_demos(&env, &expert, env.nominal_state(), 250, 0.0, 3).unwrap();
        assert_eq!(data.len(), 250);
        for i in 0..data.len() {
            let x = [data.states[[i, 0]], data.states[[i, 1]]];
            assert!(env.cycle.nearest(x).1 < 1e-3);
        }
    }

    #[test]
    fn zero_control_section_hits_are_on_the_cycle() {
        let env = SmoothCycleEnv::new(SmoothCycleParams::default()).unwrap();
        let mut rng = rng_for(0, 0);
        let t = rollout(&env, env.nominal_state(), &ZeroController(1), 800, &mut rng);
        assert!(t.section_hits.len() >= 2);
        for hit in &t.section_hits {
            assert!((hit[0] - env.cycle.states[0][1]).abs() < 1e-6);
        }
    }
}
