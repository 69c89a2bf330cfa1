//! Non-learned predictors: constant-velocity extrapolation and conversion of
//! weighted trajectory sets with Gaussian uncertainty into occupancy.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix2, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgentClass, FlowField, Grid, GridSpec, OccupancyGrid, Vec2};
use crate::labels::{build_labels, regular_agents, LabelMode};
use crate::losses::{ClassPrediction, Prediction};
use crate::scene::synth::constant_velocity_position;
use crate::scene::{box_cells, AgentId, AgentState, AgentTrack, OrientedBox, Scenario};

/// Probabilities used for predicted occupied and free cells.
pub const OCCUPIED_PROB: f64 = 0.99;
pub const FREE_PROB: f64 = 0.01;

/// Keeps each regular agent's past and replaces its future with constant
/// velocity and heading from its `t = 0` state. Regular agents unobserved at
/// `t = 0` are dropped with a warning.
pub fn extrapolate_constant_velocity(scenario: &Scenario) -> Result<Scenario> {
    let spec = &scenario.spec;
    let regular = regular_agents(scenario);
    let mut tracks = Vec::new();
    for track in scenario.tracks() {
        if !regular.contains(&track.id) {
            continue;
        }
        let Some(now) = track.valid_state(0).copied() else {
            log::warn!("agent {} is not observed at t = 0; skipped", track.id);
            continue;
        };
        let states = (spec.first_step()..=spec.last_step())
            .map(|t| {
                if t <= 0 {
                    return *track.state(t).expect("track spans the scenario");
                }
                AgentState {
                    center: constant_velocity_position(
                        now.center,
                        now.velocity,
                        t as f64 * spec.step_seconds,
                    ),
                    acceleration: Vec2::zeros(),
                    ..now
                }
            })
            .collect();
        tracks.push(AgentTrack::new(track.id, track.class, spec.first_step(), states)?);
    }
    Scenario::new(spec.clone(), tracks)
}

/// Constant-velocity prediction rendered through the label pipeline, with
/// near-binary occupancy and the extrapolated rigid-motion flow.
pub fn constant_velocity_predict(scenario: &Scenario) -> Result<Prediction> {
    let moved = extrapolate_constant_velocity(scenario)?;
    let labels = build_labels(&moved, LabelMode::Regular)?;
    let classes = labels
        .classes
        .into_iter()
        .map(|(class, set)| {
            let occupancy: Vec<OccupancyGrid> = set
                .waypoints
                .iter()
                .map(|f| near_binary(&f.occupancy))
                .collect();
            let flows = set.waypoints.into_iter().map(|f| f.flow).collect();
            Ok((class, ClassPrediction::from_probabilities(&occupancy, flows)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Prediction {
        spec: scenario.spec.clone(),
        classes,
    })
}

/// Maps occupied cells to [`OCCUPIED_PROB`] and the rest to [`FREE_PROB`].
pub fn near_binary(occ: &OccupancyGrid) -> OccupancyGrid {
    OccupancyGrid::clamped(occ.grid().map(|&v| if v != 0.0 { OCCUPIED_PROB } else { FREE_PROB }))
}

/// Pose and uncertainty of one hypothesis at one waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisWaypoint {
    /// Waypoint index, 1-based.
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// Position covariance in square meters.
    pub cov: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHypothesis {
    pub likelihood: f64,
    pub waypoints: Vec<HypothesisWaypoint>,
}

/// All hypotheses for one agent, sharing its box extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHypotheses {
    pub id: AgentId,
    pub class: AgentClass,
    pub w: f64,
    pub l: f64,
    pub hypotheses: Vec<TrajectoryHypothesis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub spec: GridSpec,
    pub agents: Vec<AgentHypotheses>,
}

const LIKELIHOOD_SLACK: f64 = 1e-6;
const PSD_TOLERANCE: f64 = 1e-12;

impl HypothesisSet {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for agent in &self.agents {
            if !(agent.w > 0.0 && agent.l > 0.0 && agent.w.is_finite() && agent.l.is_finite()) {
                return Err(Error::InvalidValue(format!("agent {} has invalid extents", agent.id)));
            }
            let mut total = 0.0;
            for h in &agent.hypotheses {
                if !(0.0..=1.0).contains(&h.likelihood) {
                    return Err(Error::InvalidValue(format!(
                        "agent {}: likelihood {} outside [0, 1]",
                        agent.id, h.likelihood
                    )));
                }
                total += h.likelihood;
                for wp in &h.waypoints {
                    if wp.t == 0 || wp.t > self.spec.num_waypoints {
                        return Err(Error::InvalidValue(format!(
                            "agent {}: waypoint {} outside 1..={}",
                            agent.id, wp.t, self.spec.num_waypoints
                        )));
                    }
                    if ![wp.x, wp.y, wp.theta].iter().all(|v| v.is_finite()) {
                        return Err(Error::InvalidValue(format!("agent {}: non-finite pose", agent.id)));
                    }
                    covariance_eigen(&wp.cov)?;
                }
            }
            if total > 1.0 + LIKELIHOOD_SLACK {
                return Err(Error::InvalidValue(format!(
                    "agent {}: likelihoods sum to {total}",
                    agent.id
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("hypotheses serialize");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Eigen-decomposition of a symmetric PSD covariance.
fn covariance_eigen(cov: &[[f64; 2]; 2]) -> Result<SymmetricEigen<f64, nalgebra::U2>> {
    let m = Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd("covariance is not finite".into()));
    }
    let scale = m.abs().max().max(1.0);
    if (cov[0][1] - cov[1][0]).abs() > PSD_TOLERANCE * scale {
        return Err(Error::NotPsd("covariance is not symmetric".into()));
    }
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -PSD_TOLERANCE * scale) {
        return Err(Error::NotPsd(format!(
            "covariance eigenvalues {:?}",
            eig.eigenvalues.as_slice()
        )));
    }
    Ok(eig)
}

/// Discrete Gaussian over integer cell offsets, truncated at Mahalanobis
/// distance 3 and normalized to unit sum. `cov` is in square cells; a
/// degenerate axis collapses to a single cell along that axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub radius: i64,
    /// Row-major `(2 * radius + 1)^2` weights, offset `(dx, dy)` at
    /// `(dy + radius) * side + dx + radius`.
    pub weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(cov_cells: &[[f64; 2]; 2]) -> Result<Self> {
        let eig = covariance_eigen(cov_cells)?;
        let lambdas = eig.eigenvalues.map(|l| l.max(0.0));
        let radius = (3.0 * lambdas.max().sqrt()).floor() as i64;
        let side = (2 * radius + 1) as usize;
        let mut weights = vec![0.0; side * side];
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let d = Vec2::new(dx as f64, dy as f64);
                let mut exponent = 0.0;
                let mut inside = true;
                for k in 0..2 {
                    let proj = eig.eigenvectors.column(k).dot(&d);
                    let l = lambdas[k];
                    if l <= PSD_TOLERANCE {
                        inside &= proj.abs() <= 1e-9;
                    } else {
                        exponent += proj * proj / l;
                    }
                }
                if inside && exponent <= 9.0 {
                    let i = (dy + radius) as usize * side + (dx + radius) as usize;
                    weights[i] = (-0.5 * exponent).exp();
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { radius, weights })
    }

    pub fn side(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    pub fn at(&self, dx: i64, dy: i64) -> f64 {
        if dx.abs() > self.radius || dy.abs() > self.radius {
            return 0.0;
        }
        self.weights[(dy + self.radius) as usize * self.side() + (dx + self.radius) as usize]
    }

    /// Convolves a sparse set of unit cells with the kernel.
    fn splat(&self, cells: &[(usize, usize)], width: usize, height: usize) -> Grid<f64> {
        let mut out = Grid::filled(width, height, 0.0);
        for &(cx, cy) in cells {
            for dy in -self.radius..=self.radius {
                for dx in -self.radius..=self.radius {
                    let k = self.at(dx, dy);
                    if k == 0.0 {
                        continue;
                    }
                    let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    let cur = *out.get(x, y);
                    out.set(x, y, cur + k);
                }
            }
        }
        out
    }
}

/// Per-class occupancy for waypoints `1 ..= T` from weighted box hypotheses.
///
/// Each hypothesis box is rasterized, blurred by its waypoint covariance and
/// scaled by its likelihood; contributions are clipped to `[0, 1]` and merged
/// with `1 - prod(1 - c)`.
pub fn trajectories_to_occupancy(
    set: &HypothesisSet,
) -> Result<BTreeMap<AgentClass, Vec<OccupancyGrid>>> {
    set.validate()?;
    let spec = &set.spec;
    let cs2 = spec.cell_size * spec.cell_size;
    // (class, waypoint index, contribution) in input order.
    let contributions: Vec<Vec<(AgentClass, usize, Grid<f64>)>> = set
        .agents
        .par_iter()
        .map(|agent| {
            let mut out = Vec::new();
            for h in &agent.hypotheses {
                for wp in &h.waypoints {
                    let b = OrientedBox {
                        center: Vec2::new(wp.x, wp.y),
                        heading: wp.theta,
                        half_width: 0.5 * agent.w,
                        half_length: 0.5 * agent.l,
                    };
                    let cells = box_cells(&b, spec);
                    let cov = wp.cov.map(|row| row.map(|v| v / cs2));
                    let kernel = GaussianKernel::new(&cov)?;
                    let mut grid = kernel.splat(&cells, spec.width, spec.height);
                    grid.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = (*v * h.likelihood).clamp(0.0, 1.0));
                    out.push((agent.class, wp.t - 1, grid));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut free: BTreeMap<AgentClass, Vec<Grid<f64>>> = AgentClass::ALL
        .iter()
        .map(|&c| (c, vec![Grid::filled(spec.width, spec.height, 1.0); spec.num_waypoints]))
        .collect();
    for (class, t, grid) in contributions.into_iter().flatten() {
        let acc = &mut free.get_mut(&class).expect("all classes present")[t];
        for (a, c) in acc.data_mut().iter_mut().zip(grid.data()) {
            *a *= 1.0 - c;
        }
    }
    Ok(free
        .into_iter()
        .map(|(class, grids)| {
            let occ = grids
                .into_iter()
                .map(|g| OccupancyGrid::clamped(g.map(|v| 1.0 - v)))
                .collect();
            (class, occ)
        })
        .collect())
}

/// Occupancy-only prediction from a hypothesis set; flows are zero.
pub fn trajectory_prediction(set: &HypothesisSet) -> Result<Prediction> {
    let spec = &set.spec;
    let classes = trajectories_to_occupancy(set)?
        .into_iter()
        .map(|(class, occ)| {
            let flows = vec![FlowField::zeros(spec.width, spec.height); occ.len()];
            Ok((class, ClassPrediction::from_probabilities(&occ, flows)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Prediction {
        spec: spec.clone(),
        classes,
    })
}

/// One constant-velocity hypothesis per agent observed at `t = 0`, with an
/// isotropic position standard deviation growing by `sigma_per_second`.
pub fn constant_velocity_hypotheses(scenario: &Scenario, sigma_per_second: f64) -> Result<HypothesisSet> {
    if !(sigma_per_second.is_finite() && sigma_per_second >= 0.0) {
        return Err(Error::InvalidConfig("sigma growth must be finite and non-negative".into()));
    }
    let spec = &scenario.spec;
    let regular = regular_agents(scenario);
    let agents = scenario
        .tracks()
        .iter()
        .filter(|t| regular.contains(&t.id))
        .filter_map(|track| {
            let now = track.valid_state(0)?;
            let waypoints = (1..=spec.num_waypoints)
                .map(|w| {
                    let tau = spec.waypoint_end_step(w) as f64 * spec.step_seconds;
                    let c = constant_velocity_position(now.center, now.velocity, tau);
                    let var = (sigma_per_second * tau).powi(2);
                    HypothesisWaypoint {
                        t: w,
                        x: c.x,
                        y: c.y,
                        theta: now.heading,
                        cov: [[var, 0.0], [0.0, var]],
                    }
                })
                .collect();
            Some(AgentHypotheses {
                id: track.id,
                class: track.class,
                w: now.width,
                l: now.length,
                hypotheses: vec![TrajectoryHypothesis {
                    likelihood: 1.0,
                    waypoints,
                }],
            })
        })
        .collect();
    Ok(HypothesisSet {
        spec: spec.clone(),
        agents,
    })
}
