//! Deterministic synthetic driving scenes.
//!
//! Every trajectory is evaluated in closed form relative to `t = 0`, so the
//! same state can be reproduced exactly by an extrapolating predictor.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgentClass, GridSpec, Vec2};

use super::{AgentId, AgentState, AgentTrack, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    ConstantVelocity,
    ConstantTurnRate,
    StopAndGo,
}

/// Relative weights of the motion models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionMix {
    pub constant_velocity: f64,
    pub constant_turn_rate: f64,
    pub stop_and_go: f64,
}

impl Default for MotionMix {
    fn default() -> Self {
        Self {
            constant_velocity: 1.0,
            constant_turn_rate: 1.0,
            stop_and_go: 1.0,
        }
    }
}

impl MotionMix {
    pub fn only(kind: MotionKind) -> Self {
        let mut mix = Self {
            constant_velocity: 0.0,
            constant_turn_rate: 0.0,
            stop_and_go: 0.0,
        };
        match kind {
            MotionKind::ConstantVelocity => mix.constant_velocity = 1.0,
            MotionKind::ConstantTurnRate => mix.constant_turn_rate = 1.0,
            MotionKind::StopAndGo => mix.stop_and_go = 1.0,
        }
        mix
    }

    fn weights(&self) -> [(MotionKind, f64); 3] {
        [
            (MotionKind::ConstantVelocity, self.constant_velocity),
            (MotionKind::ConstantTurnRate, self.constant_turn_rate),
            (MotionKind::StopAndGo, self.stop_and_go),
        ]
    }

    fn sample(&self, rng: &mut impl Rng) -> MotionKind {
        let total: f64 = self.weights().iter().map(|w| w.1).sum();
        let mut u = rng.random::<f64>() * total;
        for (kind, w) in self.weights() {
            if u < w {
                return kind;
            }
            u -= w;
        }
        // Rounding can leave `u` just past the last bucket.
        self.weights()
            .iter()
            .rev()
            .find(|w| w.1 > 0.0)
            .map(|w| w.0)
            .unwrap_or(MotionKind::ConstantVelocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedRange {
    pub min: f64,
    pub max: f64,
}

impl SpeedRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && 0.0 <= self.min && self.min <= self.max)
        {
            return Err(Error::InvalidConfig(format!(
                "{name} must satisfy 0 <= min <= max"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub spec: GridSpec,
    /// Agents observed over the whole horizon.
    pub agents: usize,
    /// Agents unobserved in the past that appear at a random future step.
    pub late_agents: usize,
    pub pedestrian_fraction: f64,
    /// Meters per second.
    pub vehicle_speed: SpeedRange,
    pub pedestrian_speed: SpeedRange,
    /// Absolute turn rate in radians per second for turning agents.
    pub turn_rate: SpeedRange,
    pub motion_mix: MotionMix,
    /// Distance in meters every box corner keeps from the grid border.
    pub margin: f64,
    /// Minimum gap in meters between the swept paths of two agents of the
    /// same class; `None` lets paths cross.
    pub min_separation: Option<f64>,
    /// Relative per-step jitter of box extents.
    pub extent_jitter: f64,
    pub max_attempts: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            spec: GridSpec::default(),
            agents: 8,
            late_agents: 0,
            pedestrian_fraction: 0.3,
            vehicle_speed: SpeedRange::new(2.0, 10.0),
            pedestrian_speed: SpeedRange::new(0.5, 1.8),
            turn_rate: SpeedRange::new(0.05, 0.4),
            motion_mix: MotionMix::default(),
            margin: 2.0,
            min_separation: Some(2.0),
            extent_jitter: 0.0,
            max_attempts: 500,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.agents == 0 {
            return Err(Error::InvalidConfig("agents must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pedestrian_fraction) {
            return Err(Error::InvalidConfig(
                "pedestrian_fraction must lie in [0, 1]".into(),
            ));
        }
        self.vehicle_speed.validate("vehicle_speed")?;
        self.pedestrian_speed.validate("pedestrian_speed")?;
        self.turn_rate.validate("turn_rate")?;
        let weights = self.motion_mix.weights();
        if weights.iter().any(|w| !(w.1.is_finite() && w.1 >= 0.0))
            || weights.iter().map(|w| w.1).sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig(
                "motion_mix weights must be non-negative with a positive sum".into(),
            ));
        }
        let extent = self.spec.cell_size * self.spec.width.min(self.spec.height) as f64;
        if !(self.margin.is_finite() && self.margin >= 0.0) || 2.0 * self.margin >= extent {
            return Err(Error::InvalidConfig(
                "margin must be non-negative and leave room inside the grid".into(),
            ));
        }
        if let Some(sep) = self.min_separation {
            if !(sep.is_finite() && sep >= 0.0) {
                return Err(Error::InvalidConfig("min_separation must be >= 0".into()));
            }
        }
        if !(self.extent_jitter.is_finite() && (0.0..0.5).contains(&self.extent_jitter)) {
            return Err(Error::InvalidConfig(
                "extent_jitter must lie in [0, 0.5)".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidConfig("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Position after `tau` seconds of constant velocity from `center`.
pub(crate) fn constant_velocity_position(center: Vec2, velocity: Vec2, tau: f64) -> Vec2 {
    center + velocity * tau
}

#[derive(Debug, Clone, Copy)]
struct Motion {
    kind: MotionKind,
    origin: Vec2,
    heading: f64,
    speed: f64,
    turn_rate: f64,
    period: f64,
    phase: f64,
}

impl Motion {
    fn direction(heading: f64) -> Vec2 {
        Vec2::new(heading.cos(), heading.sin())
    }

    /// Center, heading, velocity and acceleration `tau` seconds after `t = 0`.
    fn evaluate(&self, tau: f64) -> (Vec2, f64, Vec2, Vec2) {
        let u0 = Self::direction(self.heading);
        match self.kind {
            MotionKind::ConstantVelocity => {
                let v = u0 * self.speed;
                (
                    constant_velocity_position(self.origin, v, tau),
                    self.heading,
                    v,
                    Vec2::zeros(),
                )
            }
            MotionKind::ConstantTurnRate => {
                let (s, w, h0) = (self.speed, self.turn_rate, self.heading);
                let h = h0 + w * tau;
                let p = self.origin
                    + Vec2::new(h.sin() - h0.sin(), h0.cos() - h.cos()) * (s / w);
                let u = Self::direction(h);
                (p, h, u * s, Vec2::new(-u.y, u.x) * (s * w))
            }
            MotionKind::StopAndGo => {
                let k = TAU / self.period;
                let travelled =
                    |t: f64| 0.5 * self.speed * (t + ((t + self.phase) * k).sin() / k);
                let d = travelled(tau) - travelled(0.0);
                let speed = 0.5 * self.speed * (1.0 + ((tau + self.phase) * k).cos());
                let accel = -0.5 * self.speed * k * ((tau + self.phase) * k).sin();
                (self.origin + u0 * d, self.heading, u0 * speed, u0 * accel)
            }
        }
    }
}

struct Candidate {
    class: AgentClass,
    states: Vec<AgentState>,
}

impl Candidate {
    fn swept(&self) -> impl Iterator<Item = (Vec2, f64)> + '_ {
        self.states
            .iter()
            .filter(|s| s.valid)
            .map(|s| (s.center, s.oriented_box().half_diagonal()))
    }

    fn separated_from(&self, other: &Candidate, gap: f64) -> bool {
        if self.class != other.class {
            return true;
        }
        self.swept().all(|(c1, r1)| {
            other
                .swept()
                .all(|(c2, r2)| (c1 - c2).norm() >= r1 + r2 + gap)
        })
    }
}

/// Generates a scenario; identical `(seed, config)` pairs give identical scenes.
pub fn generate_synthetic_scenario(seed: u64, config: &SyntheticConfig) -> Result<Scenario> {
    config.validate()?;
    let spec = &config.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = Vec2::new(spec.origin[0], spec.origin[1]) + Vec2::repeat(config.margin);
    let hi = Vec2::new(
        spec.origin[0] + spec.width as f64 * spec.cell_size,
        spec.origin[1] + spec.height as f64 * spec.cell_size,
    ) - Vec2::repeat(config.margin);

    let total = config.agents + config.late_agents;
    let mut placed: Vec<Candidate> = Vec::with_capacity(total);
    for index in 0..total {
        let late = index >= config.agents;
        let class = if rng.random::<f64>() < config.pedestrian_fraction {
            AgentClass::Pedestrian
        } else {
            AgentClass::Vehicle
        };
        let mut accepted = None;
        for _ in 0..config.max_attempts {
            let cand = sample_candidate(&mut rng, config, class, late, lo, hi);
            let inside = cand.states.iter().filter(|s| s.valid).all(|s| {
                s.oriented_box()
                    .corners()
                    .iter()
                    .all(|c| c.x >= lo.x && c.y >= lo.y && c.x <= hi.x && c.y <= hi.y)
            });
            let apart = config
                .min_separation
                .is_none_or(|gap| placed.iter().all(|p| cand.separated_from(p, gap)));
            if inside && apart {
                accepted = Some(cand);
                break;
            }
        }
        let cand = accepted.ok_or_else(|| {
            Error::InvalidConfig(format!(
                "could not place agent {} within {} attempts; use fewer agents, \
                 lower speeds or a larger grid",
                index + 1,
                config.max_attempts
            ))
        })?;
        placed.push(cand);
    }

    let tracks = placed
        .into_iter()
        .enumerate()
        .map(|(i, c)| AgentTrack::new((i + 1) as AgentId, c.class, spec.first_step(), c.states))
        .collect::<Result<Vec<_>>>()?;
    Scenario::new(spec.clone(), tracks)
}

fn sample_candidate(
    rng: &mut ChaCha8Rng,
    config: &SyntheticConfig,
    class: AgentClass,
    late: bool,
    lo: Vec2,
    hi: Vec2,
) -> Candidate {
    let spec = &config.spec;
    let (length, width, speeds) = match class {
        AgentClass::Vehicle => (
            rng.random_range(3.8..5.2),
            rng.random_range(1.7..2.1),
            config.vehicle_speed,
        ),
        AgentClass::Pedestrian => (
            rng.random_range(0.5..0.9),
            rng.random_range(0.5..0.9),
            config.pedestrian_speed,
        ),
    };
    let kind = config.motion_mix.sample(rng);
    let origin = Vec2::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y));
    let heading = rng.random_range(-PI..PI);
    let speed = speeds.sample(rng);
    let mut turn_rate = config.turn_rate.sample(rng);
    if rng.random::<bool>() {
        turn_rate = -turn_rate;
    }
    let period = rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..period);
    let kind = if kind == MotionKind::ConstantTurnRate && turn_rate.abs() < 1e-9 {
        MotionKind::ConstantVelocity
    } else {
        kind
    };
    let motion = Motion {
        kind,
        origin,
        heading,
        speed,
        turn_rate,
        period,
        phase,
    };
    let appear = if late {
        rng.random_range(1..=spec.last_step())
    } else {
        spec.first_step()
    };

    let states = (spec.first_step()..=spec.last_step())
        .map(|t| {
            let (jw, jl) = if config.extent_jitter > 0.0 {
                let j = config.extent_jitter;
                (rng.random_range(-j..j), rng.random_range(-j..j))
            } else {
                (0.0, 0.0)
            };
            if t < appear {
                return AgentState::unobserved();
            }
            let (center, heading, velocity, acceleration) =
                motion.evaluate(t as f64 * spec.step_seconds);
            AgentState {
                center,
                heading,
                width: width * (1.0 + jw),
                length: length * (1.0 + jl),
                velocity,
                acceleration,
                valid: true,
            }
        })
        .collect();
    Candidate { class, states }
}
