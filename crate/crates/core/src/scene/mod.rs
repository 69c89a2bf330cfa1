//! Agent tracks, scenarios and their JSON file format.

mod geometry;
pub(crate) mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgentClass, GridSpec, Vec2};

pub use geometry::{
    box_cell_overlap, box_cells, clipped_cell_area, normalize_angle, rigid_transform_between,
    OrientedBox, RigidTransform,
};
pub use synth::{generate_synthetic_scenario, MotionKind, MotionMix, SpeedRange, SyntheticConfig};

/// Agent identifier; `0` is reserved for "no agent".
pub type AgentId = u32;

/// One agent's kinematic state at one dataset step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub center: Vec2,
    pub heading: f64,
    pub width: f64,
    pub length: f64,
    pub velocity: Vec2,
    pub acceleration: Vec2,
    pub valid: bool,
}

impl AgentState {
    pub fn unobserved() -> Self {
        Self {
            center: Vec2::zeros(),
            heading: 0.0,
            width: 0.0,
            length: 0.0,
            velocity: Vec2::zeros(),
            acceleration: Vec2::zeros(),
            valid: false,
        }
    }

    pub fn oriented_box(&self) -> OrientedBox {
        OrientedBox {
            center: self.center,
            heading: self.heading,
            half_width: 0.5 * self.width,
            half_length: 0.5 * self.length,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.valid {
            return Ok(());
        }
        let finite = [
            self.center.x,
            self.center.y,
            self.heading,
            self.width,
            self.length,
            self.velocity.x,
            self.velocity.y,
            self.acceleration.x,
            self.acceleration.y,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidScenario("non-finite agent state".into()));
        }
        if self.width <= 0.0 || self.length <= 0.0 {
            return Err(Error::InvalidScenario("box extents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub id: AgentId,
    pub class: AgentClass,
    first_step: i64,
    states: Vec<AgentState>,
}

impl AgentTrack {
    /// `states[i]` is the state at dataset step `first_step + i`. Headings are
    /// normalized into `(-pi, pi]`.
    pub fn new(
        id: AgentId,
        class: AgentClass,
        first_step: i64,
        mut states: Vec<AgentState>,
    ) -> Result<Self> {
        if id == 0 {
            return Err(Error::InvalidScenario("agent id 0 is reserved".into()));
        }
        for s in &mut states {
            s.validate()?;
            if s.valid {
                s.heading = normalize_angle(s.heading);
            }
        }
        Ok(Self {
            id,
            class,
            first_step,
            states,
        })
    }

    pub fn first_step(&self) -> i64 {
        self.first_step
    }

    pub fn last_step(&self) -> i64 {
        self.first_step + self.states.len() as i64 - 1
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn state(&self, t: i64) -> Option<&AgentState> {
        let i = t.checked_sub(self.first_step)?;
        usize::try_from(i).ok().and_then(|i| self.states.get(i))
    }

    /// The state at `t` if it was observed.
    pub fn valid_state(&self, t: i64) -> Option<&AgentState> {
        self.state(t).filter(|s| s.valid)
    }

    pub fn valid_at(&self, t: i64) -> bool {
        self.valid_state(t).is_some()
    }

    pub fn valid_in(&self, steps: impl IntoIterator<Item = i64>) -> bool {
        steps.into_iter().any(|t| self.valid_at(t))
    }
}

/// Road sample point; carried through files, never consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadPoint {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "type")]
    pub kind: String,
}

/// Traffic-light state at the end of a controlled lane; carried, never consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLightPoint {
    pub t: i64,
    pub x: f64,
    pub y: f64,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: GridSpec,
    tracks: Vec<AgentTrack>,
    pub road_points: Vec<RoadPoint>,
    pub traffic_lights: Vec<TrafficLightPoint>,
}

impl Scenario {
    /// Validates the grid layout, ID uniqueness and that every track covers exactly
    /// `spec.first_step() ..= spec.last_step()`.
    pub fn new(spec: GridSpec, tracks: Vec<AgentTrack>) -> Result<Self> {
        spec.validate()?;
        let (first, last) = (spec.first_step(), spec.last_step());
        let mut ids = BTreeSet::new();
        for track in &tracks {
            if !ids.insert(track.id) {
                return Err(Error::InvalidScenario(format!(
                    "duplicate agent id {}",
                    track.id
                )));
            }
            if track.first_step() != first || track.last_step() != last {
                return Err(Error::InvalidScenario(format!(
                    "track {} covers [{}, {}], expected [{first}, {last}]",
                    track.id,
                    track.first_step(),
                    track.last_step()
                )));
            }
        }
        Ok(Self {
            spec,
            tracks,
            road_points: Vec::new(),
            traffic_lights: Vec::new(),
        })
    }

    pub fn tracks(&self) -> &[AgentTrack] {
        &self.tracks
    }

    pub fn track(&self, id: AgentId) -> Option<&AgentTrack> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn first_step(&self) -> i64 {
        self.spec.first_step()
    }

    pub fn last_step(&self) -> i64 {
        self.spec.last_step()
    }

    pub fn check_step(&self, t: i64) -> Result<()> {
        let (first, last) = (self.first_step(), self.last_step());
        if t < first || t > last {
            return Err(Error::StepOutOfRange { t, first, last });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        file.into_scenario()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ScenarioFile::from_scenario(self))
            .expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    spec: GridSpec,
    tracks: Vec<TrackRecord>,
    #[serde(default)]
    road_points: Vec<RoadPoint>,
    #[serde(default)]
    traffic_lights: Vec<TrafficLightPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRecord {
    id: AgentId,
    class: AgentClass,
    states: Vec<StateRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRecord {
    t: i64,
    x: f64,
    y: f64,
    theta: f64,
    w: f64,
    l: f64,
    vx: f64,
    vy: f64,
    ax: f64,
    ay: f64,
    valid: bool,
}

impl ScenarioFile {
    fn from_scenario(s: &Scenario) -> Self {
        let tracks = s
            .tracks
            .iter()
            .map(|track| TrackRecord {
                id: track.id,
                class: track.class,
                states: track
                    .states
                    .iter()
                    .enumerate()
                    .map(|(i, st)| StateRecord {
                        t: track.first_step + i as i64,
                        x: st.center.x,
                        y: st.center.y,
                        theta: st.heading,
                        w: st.width,
                        l: st.length,
                        vx: st.velocity.x,
                        vy: st.velocity.y,
                        ax: st.acceleration.x,
                        ay: st.acceleration.y,
                        valid: st.valid,
                    })
                    .collect(),
            })
            .collect();
        Self {
            spec: s.spec.clone(),
            tracks,
            road_points: s.road_points.clone(),
            traffic_lights: s.traffic_lights.clone(),
        }
    }

    fn into_scenario(self) -> Result<Scenario> {
        let mut tracks = Vec::with_capacity(self.tracks.len());
        for rec in self.tracks {
            let mut records = rec.states;
            records.sort_by_key(|s| s.t);
            let first = records.first().map(|s| s.t).unwrap_or(0);
            for (i, s) in records.iter().enumerate() {
                if s.t != first + i as i64 {
                    return Err(Error::InvalidScenario(format!(
                        "track {} has a gap or duplicate at t = {}",
                        rec.id, s.t
                    )));
                }
            }
            let states = records
                .into_iter()
                .map(|s| AgentState {
                    center: Vec2::new(s.x, s.y),
                    heading: s.theta,
                    width: s.w,
                    length: s.l,
                    velocity: Vec2::new(s.vx, s.vy),
                    acceleration: Vec2::new(s.ax, s.ay),
                    valid: s.valid,
                })
                .collect();
            tracks.push(AgentTrack::new(rec.id, rec.class, first, states)?);
        }
        let mut scenario = Scenario::new(self.spec, tracks)?;
        scenario.road_points = self.road_points;
        scenario.traffic_lights = self.traffic_lights;
        Ok(scenario)
    }
}
