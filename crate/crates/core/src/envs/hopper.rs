//! Vertical spring-mass hopper with flight and stance modes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Controller, Environment, StepInfo};
use crate::error::{LvrError, Result};

/// Bisection stops once the guard residual drops below this.
pub const EVENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Flight,
    Stance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Touchdown,
    Liftoff,
    Apex,
    Bottom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopperParams {
    pub mass: f64,
    pub spring_k: f64,
    pub rest_length: f64,
    pub gravity: f64,
    /// Touchdown velocity restitution, in (0, 1].
    pub restitution: f64,
    pub dt: f64,
    /// RK4 substeps per control period.
    pub substeps: usize,
    /// Std of the velocity kick added each control period.
    pub noise_std: f64,
    /// Std of the per-touchdown ground height offset.
    pub roughness: f64,
    pub max_thrust: f64,
    /// Apex height used by the tracking reward.
    pub target_apex: f64,
    /// Minimum apex height above the rest length.
    pub min_clearance: f64,
    /// Minimum leg length during stance.
    pub min_leg: f64,
    pub max_height: f64,
    pub max_stance_time: f64,
    /// Re-query the controller at every substep while in stance.
    pub requery_in_stance: bool,
}

impl Default for HopperParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            spring_k: 200.0,
            rest_length: 1.0,
            gravity: 9.81,
            restitution: 0.95,
            dt: 0.02,
            substeps: 10,
            noise_std: 0.0,
            roughness: 0.0,
            max_thrust: 50.0,
            target_apex: 1.5,
            min_clearance: 0.3,
            min_leg: 0.3,
            max_height: 4.0,
            max_stance_time: 2.0,
            requery_in_stance: true,
        }
    }
}

impl HopperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("spring_k", self.spring_k),
            ("rest_length", self.rest_length),
            ("gravity", self.gravity),
            ("dt", self.dt),
            ("max_thrust", self.max_thrust),
            ("max_height", self.max_height),
            ("max_stance_time", self.max_stance_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LvrError::config(format!("hopper.{name} must be positive, got {v}")));
            }
        }
        if !(self.restitution > 0.0 && self.restitution <= 1.0) {
            return Err(LvrError::config(format!(
                "hopper.restitution must lie in (0, 1], got {}",
                self.restitution
            )));
        }
        if self.substeps == 0 {
            return Err(LvrError::config("hopper.substeps must be at least 1"));
        }
        if self.noise_std < 0.0 || self.roughness < 0.0 {
            return Err(LvrError::config("hopper noise and roughness must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopperState {
    pub z: f64,
    pub zd: f64,
    pub mode: Mode,
    /// Ground height offset for the current / next touchdown.
    pub ground: f64,
    pub stance_time: f64,
    pub last_apex: f64,
}

impl HopperState {
    pub fn apex(z: f64) -> Self {
        Self {
            z,
            zd: 0.0,
            mode: Mode::Flight,
            ground: 0.0,
            stance_time: 0.0,
            last_apex: z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridHopperEnv {
    pub params: HopperParams,
}

impl HybridHopperEnv {
    pub fn new(params: HopperParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// Total mechanical energy, including the spring during stance.
    pub fn energy(&self, s: &HopperState) -> f64 {
        let p = &self.params;
        let mut e = 0.5 * p.mass * s.zd * s.zd + p.mass * p.gravity * s.z;
        if s.mode == Mode::Stance {
            let c = p.rest_length + s.ground - s.z;
            e += 0.5 * p.spring_k * c * c;
        }
        e
    }

    fn accel(&self, z: f64, mode: Mode, ground: f64, u: f64) -> f64 {
        let p = &self.params;
        match mode {
            Mode::Flight => -p.gravity,
            Mode::Stance => (p.spring_k * (p.rest_length + ground - z) + u) / p.mass - p.gravity,
        }
    }

    fn rk4(&self, s: &HopperState, u: f64, h: f64) -> HopperState {
        let f = |z: f64, zd: f64| (zd, self.accel(z, s.mode, s.ground, u));
        let (k1z, k1v) = f(s.z, s.zd);
        let (k2z, k2v) = f(s.z + 0.5 * h * k1z, s.zd + 0.5 * h * k1v);
        let (k3z, k3v) = f(s.z + 0.5 * h * k2z, s.zd + 0.5 * h * k2v);
        let (k4z, k4v) = f(s.z + h * k3z, s.zd + h * k3v);
        HopperState {
            z: s.z + h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z),
            zd: s.zd + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
            stance_time: if s.mode == Mode::Stance { s.stance_time + h } else { s.stance_time },
            ..*s
        }
    }

    /// Guard value for an event; crossings go from the "before" sign
    /// (positive for touchdown/apex, negative for liftoff/bottom) through zero.
    pub fn guard(&self, s: &HopperState, kind: EventKind) -> f64 {
        match kind {
            EventKind::Touchdown | EventKind::Liftoff => s.z - self.params.rest_length - s.ground,
            EventKind::Apex | EventKind::Bottom => s.zd,
        }
    }

    fn crossed(&self, before: &HopperState, after: &HopperState, kind: EventKind) -> bool {
        let (g0, g1) = (self.guard(before, kind), self.guard(after, kind));
        match kind {
            EventKind::Touchdown | EventKind::Apex => g0 > 0.0 && g1 <= 0.0,
            EventKind::Liftoff | EventKind::Bottom => g0 < 0.0 && g1 >= 0.0,
        }
    }

    fn events_for(mode: Mode) -> [EventKind; 2] {
        match mode {
            Mode::Flight => [EventKind::Touchdown, EventKind::Apex],
            Mode::Stance => [EventKind::Liftoff, EventKind::Bottom],
        }
    }

    /// Integrates for at most `h` seconds under constant `u`, stopping at the
    /// first guard crossing. Returns the state (on the post-crossing side of
    /// the guard, before any reset), the time used and the event.
    fn substep(&self, s: &HopperState, u: f64, h: f64) -> (HopperState, f64, Option<EventKind>) {
        let end = self.rk4(s, u, h);
        let mut best: Option<(f64, HopperState, EventKind)> = None;
        for kind in Self::events_for(s.mode) {
            if !self.crossed(s, &end, kind) {
                continue;
            }
            let (mut lo, mut hi) = (0.0, h);
            let mut at_hi = end;
            for _ in 0..200 {
                if self.guard(&at_hi, kind).abs() < EVENT_TOL || hi - lo < 1e-16 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let at_mid = self.rk4(s, u, mid);
                if self.crossed(s, &at_mid, kind) {
                    hi = mid;
                    at_hi = at_mid;
                } else {
                    lo = mid;
                }
            }
            if best.as_ref().map_or(true, |(t, _, _)| hi < *t) {
                best = Some((hi, at_hi, kind));
            }
        }
        match best {
            Some((t, st, kind)) => (st, t, Some(kind)),
            None => (end, h, None),
        }
    }

    fn apply_event(&self, s: &mut HopperState, kind: EventKind, rng: Option<&mut ChaCha8Rng>) {
        let p = &self.params;
        match kind {
            EventKind::Touchdown => {
                s.mode = Mode::Stance;
                s.zd *= p.restitution;
                s.stance_time = 0.0;
            }
            EventKind::Liftoff => {
                s.mode = Mode::Flight;
            }
            EventKind::Apex => {
                s.last_apex = s.z;
                // The next touchdown height is drawn at apex, where it cannot
                // place the foot below ground.
                if let Some(rng) = rng {
                    if p.roughness > 0.0 {
                        let draw: f64 = rng.sample::<f64, _>(StandardNormal) * p.roughness;
                        s.ground = draw.min(s.z - p.rest_length - 1e-6);
                    }
                }
            }
            EventKind::Bottom => {}
        }
    }

    fn failure(&self, s: &HopperState) -> Option<String> {
        let p = &self.params;
        if !(s.z.is_finite() && s.zd.is_finite()) {
            return Some("non-finite state".into());
        }
        if s.z > p.max_height {
            return Some(format!("height {:.3} above {}", s.z, p.max_height));
        }
        if s.mode == Mode::Stance {
            if s.z - s.ground < p.min_leg {
                return Some(format!("leg compressed to {:.3}", s.z - s.ground));
            }
            if s.stance_time > p.max_stance_time {
                return Some("stuck in stance".into());
            }
        }
        None
    }

    fn apex_failure(&self, s: &HopperState) -> Option<String> {
        let clearance = s.z - self.params.rest_length;
        (clearance < self.params.min_clearance).then(|| format!("apex clearance {clearance:.3} too low"))
    }

    fn clamp_thrust(&self, u: f64) -> f64 {
        if u.is_nan() {
            return u;
        }
        u.clamp(-self.params.max_thrust, self.params.max_thrust)
    }

    /// Integrates for `duration` seconds under a constant thrust, applying
    /// resets at every event. Returns the final state and the events hit,
    /// each with the pre-reset state at the crossing.
    pub fn integrate_fixed(&self, s: &HopperState, u: f64, duration: f64) -> (HopperState, Vec<(EventKind, HopperState)>) {
        let mut st = *s;
        let mut events = Vec::new();
        let h = self.params.dt / self.params.substeps as f64;
        let mut remaining = duration;
        while remaining > 1e-15 {
            let (next, used, ev) = self.substep(&st, self.clamp_thrust(u), h.min(remaining));
            st = next;
            remaining -= used;
            if let Some(kind) = ev {
                events.push((kind, st));
                self.apply_event(&mut st, kind, None);
            }
        }
        (st, events)
    }

    fn query(&self, ctrl: &dyn Controller, s: &HopperState) -> f64 {
        self.clamp_thrust(ctrl.act(&self.observe(s))[0])
    }

    fn tracking_reward(&self, s: &HopperState) -> f64 {
        let e = (s.last_apex - self.params.target_apex) / 0.1;
        (-e * e).exp()
    }
}

impl Environment for HybridHopperEnv {
    type State = HopperState;

    fn name(&self) -> &'static str {
        "hopper"
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn control_dt(&self) -> f64 {
        self.params.dt
    }

    fn nominal_state(&self) -> HopperState {
        HopperState::apex(self.params.target_apex)
    }

    fn perturbed_state(&self, rng: &mut ChaCha8Rng) -> HopperState {
        let z = self.params.target_apex + rng.gen_range(-0.15..0.15);
        HopperState::apex(z)
    }

    fn observe(&self, s: &HopperState) -> Vec<f64> {
        vec![s.z, s.zd, if s.mode == Mode::Stance { 1.0 } else { 0.0 }]
    }

    fn mode_label(&self, obs: &[f64]) -> usize {
        usize::from(obs[2] > 0.5)
    }

    fn step(&self, s: &mut HopperState, ctrl: &dyn Controller, rng: &mut ChaCha8Rng) -> StepInfo {
        let p = &self.params;
        let h = p.dt / p.substeps as f64;
        let mut u = self.query(ctrl, s);
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
            let (next, used, ev) = self.substep(s, u, h.min(remaining));
            *s = next;
            remaining -= used;
            if let Some(kind) = ev {
                self.apply_event(s, kind, Some(rng));
                if kind == EventKind::Apex {
                    info.section_hits.push(vec![s.z]);
                    if let Some(reason) = self.apex_failure(s) {
                        info.fallen = Some(reason);
                        return info;
                    }
                }
                u = self.query(ctrl, s);
            } else if p.requery_in_stance && s.mode == Mode::Stance && remaining > 1e-12 {
                u = self.query(ctrl, s);
            }
            if let Some(reason) = self.failure(s) {
                info.fallen = Some(reason);
                return info;
            }
        }
        if p.noise_std > 0.0 {
            let kick: f64 = StandardNormal.sample(rng);
            s.zd += p.noise_std * kick;
        }
        info.reward = self.tracking_reward(s);
        info
    }

    fn section_dim(&self) -> usize {
        1
    }

    fn lift_section(&self, coords: &[f64]) -> HopperState {
        HopperState::apex(coords[0])
    }

    fn with_noise(&self, std: f64) -> Self {
        let mut e = self.clone();
        e.params.noise_std = std;
        e
    }

    fn with_perturbation(&self, level: f64) -> Self {
        let mut e = self.clone();
        e.params.roughness = level;
        e
    }
}

/// Stance thrust proportional to the apex-height error, where the apex
/// height is predicted from the current energy. Thrust is applied only on
/// the rebound (`zd > 0`) so it always adds energy before liftoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopperExpert {
    pub kp: f64,
    pub target_apex: f64,
    pub params: HopperParams,
}

impl HopperExpert {
    pub fn new(env: &HybridHopperEnv, kp: f64) -> Result<Self> {
        if !(kp > 0.0) {
            return Err(LvrError::config(format!("expert gain must be positive, got {kp}")));
        }
        let expert = Self {
            kp,
            target_apex: env.params.target_apex,
            params: env.params.clone(),
        };
        let (_, slope) = expert.predicted_return_slope()?;
        if slope.abs() >= 1.0 {
            return Err(LvrError::config(format!(
                "expert gain {kp} does not contract the apex error (slope {slope:.3})"
            )));
        }
        Ok(expert)
    }

    /// Apex height implied by the current energy, assuming nominal ground.
    pub fn energy_height(&self, z: f64, zd: f64, stance: bool) -> f64 {
        let p = &self.params;
        let mut a = z + zd * zd / (2.0 * p.gravity);
        if stance {
            let c = p.rest_length - z;
            a += p.spring_k * c * c / (2.0 * p.mass * p.gravity);
        }
        a
    }

    fn stroke(&self, a0: f64) -> (f64, f64) {
        let p = &self.params;
        let mg = p.mass * p.gravity;
        let root = (mg * mg + 2.0 * p.spring_k * mg * (a0 - p.rest_length)).sqrt();
        ((mg + root) / p.spring_k, mg / root)
    }

    /// Apex-to-apex map under continuous application of the thrust law.
    pub fn predicted_return(&self, apex: f64) -> f64 {
        let p = &self.params;
        let kappa = self.kp / (p.mass * p.gravity);
        let a0 = p.rest_length + p.restitution.powi(2) * (apex - p.rest_length);
        let (s, _) = self.stroke(a0);
        self.target_apex - (self.target_apex - a0) * (-kappa * s).exp()
    }

    /// Fixed point of [`Self::predicted_return`] and the map's derivative there.
    pub fn predicted_return_slope(&self) -> Result<(f64, f64)> {
        let p = &self.params;
        let (mut lo, mut hi) = (p.rest_length + 1e-9, self.target_apex.max(p.rest_length + 1e-6));
        let f = |a: f64| self.predicted_return(a) - a;
        if f(lo) * f(hi) > 0.0 {
            return Err(LvrError::numerical("apex return map has no fixed point in range"));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let a = 0.5 * (lo + hi);
        let kappa = self.kp / (p.mass * p.gravity);
        let g2 = p.restitution.powi(2);
        let a0 = p.rest_length + g2 * (a - p.rest_length);
        let (s, ds) = self.stroke(a0);
        let slope = g2 * (-kappa * s).exp() * (1.0 + (self.target_apex - a0) * kappa * ds);
        Ok((a, slope))
    }
}

impl Controller for HopperExpert {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        let stance = obs[2] > 0.5;
        if !stance || obs[1] <= 0.0 {
            return vec![0.0];
        }
        let a = self.energy_height(obs[0], obs[1], true);
        vec![(self.kp * (self.target_apex - a)).clamp(-self.params.max_thrust, self.params.max_thrust)]
    }
}
