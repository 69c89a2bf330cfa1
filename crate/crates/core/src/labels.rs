//! Ground-truth occupancy, backward flow and agent-ID labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgentClass, FlowField, Grid, GridSpec, IdGrid, OccupancyGrid, Vec2};
use crate::scene::{box_cells, rigid_transform_between, AgentId, RigidTransform, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Agents observed at any past step.
    Regular,
    /// Agents never observed in the past that are observed at some future step.
    Speculative,
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Regular => "regular",
            LabelMode::Speculative => "speculative",
        })
    }
}

/// Occupancy, backward flow and owner IDs of one class at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub occupancy: OccupancyGrid,
    pub flow: FlowField,
    pub ids: IdGrid,
}

impl LabeledFrame {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            occupancy: OccupancyGrid::zeros(width, height),
            flow: FlowField::zeros(width, height),
            ids: Grid::filled(width, height, 0),
        }
    }

    /// IDs present in the frame, excluding `0`.
    pub fn agent_ids(&self) -> BTreeSet<AgentId> {
        self.ids.data().iter().copied().filter(|&id| id != 0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub class: AgentClass,
    pub mode: LabelMode,
    /// Frame at `t = 0`.
    pub current: LabeledFrame,
    /// Waypoints `1 ..= num_waypoints`.
    pub waypoints: Vec<LabeledFrame>,
}

/// Label sets for every class of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub spec: GridSpec,
    pub mode: LabelMode,
    pub classes: BTreeMap<AgentClass, LabelSet>,
}

impl Labels {
    pub fn class(&self, class: AgentClass) -> Option<&LabelSet> {
        self.classes.get(&class)
    }
}

/// Agents valid at some step in `first_step ..= 0`.
pub fn regular_agents(scenario: &Scenario) -> BTreeSet<AgentId> {
    let first = scenario.first_step();
    scenario
        .tracks()
        .iter()
        .filter(|t| t.valid_in(first..=0))
        .map(|t| t.id)
        .collect()
}

/// Agents invalid at every past step and valid at some future step.
pub fn speculative_agents(scenario: &Scenario) -> BTreeSet<AgentId> {
    let (first, last) = (scenario.first_step(), scenario.last_step());
    scenario
        .tracks()
        .iter()
        .filter(|t| !t.valid_in(first..=0) && t.valid_in(1..=last))
        .map(|t| t.id)
        .collect()
}

pub fn agents_for_mode(scenario: &Scenario, mode: LabelMode) -> BTreeSet<AgentId> {
    match mode {
        LabelMode::Regular => regular_agents(scenario),
        LabelMode::Speculative => speculative_agents(scenario),
    }
}

/// Rasterizes the selected agents of `class` at step `t`. Overlapping cells
/// belong to the smallest agent ID.
fn rasterize(
    scenario: &Scenario,
    t: i64,
    class: AgentClass,
    selection: Option<&BTreeSet<AgentId>>,
) -> Result<(OccupancyGrid, IdGrid)> {
    scenario.check_step(t)?;
    let spec = &scenario.spec;
    let mut ids: IdGrid = Grid::filled(spec.width, spec.height, 0);
    for track in scenario.tracks() {
        if track.class != class || selection.is_some_and(|s| !s.contains(&track.id)) {
            continue;
        }
        let Some(state) = track.valid_state(t) else {
            continue;
        };
        for (x, y) in box_cells(&state.oriented_box(), spec) {
            let owner = *ids.get(x, y);
            if owner == 0 || track.id < owner {
                ids.set(x, y, track.id);
            }
        }
    }
    let occupancy = OccupancyGrid::new(ids.map(|&id| if id != 0 { 1.0 } else { 0.0 }))?;
    Ok((occupancy, ids))
}

/// Backward flow on every owned cell of `ids`: where the owner's part at that
/// cell was at step `from`, minus the cell itself, in cells. Owners not
/// observed at both `from` and `to` get zero flow.
fn owner_flow(scenario: &Scenario, ids: &IdGrid, from: i64, to: i64) -> Result<FlowField> {
    let spec = &scenario.spec;
    let mut transforms: HashMap<AgentId, Option<RigidTransform>> = HashMap::new();
    let mut flow = Grid::filled(spec.width, spec.height, Vec2::zeros());
    for y in 0..spec.height {
        for x in 0..spec.width {
            let id = *ids.get(x, y);
            if id == 0 {
                continue;
            }
            let transform = *transforms.entry(id).or_insert_with(|| {
                let track = scenario.track(id)?;
                let (a, b) = (track.valid_state(from)?, track.valid_state(to)?);
                rigid_transform_between(a, b).ok()
            });
            if let Some(tf) = transform {
                let here = spec.cell_center_world(x, y);
                flow.set(x, y, (tf.apply(here) - here) / spec.cell_size);
            }
        }
    }
    FlowField::new(flow)
}

fn render_frame_with(
    scenario: &Scenario,
    t: i64,
    class: AgentClass,
    selection: Option<&BTreeSet<AgentId>>,
) -> Result<LabeledFrame> {
    let (occupancy, ids) = rasterize(scenario, t, class, selection)?;
    let flow = if t > scenario.first_step() {
        owner_flow(scenario, &ids, t - 1, t)?
    } else {
        FlowField::zeros(scenario.spec.width, scenario.spec.height)
    };
    Ok(LabeledFrame {
        occupancy,
        flow,
        ids,
    })
}

/// Ground-truth occupancy and owner IDs of all agents of `class` at step `t`.
pub fn render_occupancy(
    scenario: &Scenario,
    t: i64,
    class: AgentClass,
) -> Result<(OccupancyGrid, IdGrid)> {
    rasterize(scenario, t, class, None)
}

/// Ground-truth backward flow from `t` to `t - 1` for all agents of `class`.
pub fn render_backward_flow(scenario: &Scenario, t: i64, class: AgentClass) -> Result<FlowField> {
    if t <= scenario.first_step() {
        return Err(Error::StepOutOfRange {
            t,
            first: scenario.first_step() + 1,
            last: scenario.last_step(),
        });
    }
    let (_, ids) = rasterize(scenario, t, class, None)?;
    owner_flow(scenario, &ids, t - 1, t)
}

/// One dataset step of labels, restricted to `selection` when given.
pub fn render_frame(
    scenario: &Scenario,
    t: i64,
    class: AgentClass,
    selection: Option<&BTreeSet<AgentId>>,
) -> Result<LabeledFrame> {
    render_frame_with(scenario, t, class, selection)
}

/// Folds per-step frames for steps `1 ..= num_waypoints * factor` into waypoints.
///
/// Waypoint occupancy is the cell-wise maximum over its window. IDs come from
/// the window's last frame, and flow is the owner's displacement from the
/// step before the window to the window's last step, on the last frame's
/// owned cells.
pub fn aggregate_waypoints(
    scenario: &Scenario,
    frames: &[LabeledFrame],
    factor: usize,
) -> Result<Vec<LabeledFrame>> {
    let expected = scenario.spec.num_waypoints * factor;
    if factor == 0 || frames.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: frames.len(),
        });
    }
    frames
        .par_chunks(factor)
        .enumerate()
        .map(|(w, window)| {
            let end = window.last().expect("non-empty window");
            let mut occupancy = window[0].occupancy.grid().clone();
            for frame in &window[1..] {
                frame.occupancy.grid().ensure_same_shape(&occupancy)?;
                for (acc, v) in occupancy.data_mut().iter_mut().zip(frame.occupancy.values()) {
                    *acc = acc.max(*v);
                }
            }
            let start_prev = (w * factor) as i64;
            let end_step = ((w + 1) * factor) as i64;
            Ok(LabeledFrame {
                occupancy: OccupancyGrid::new(occupancy)?,
                flow: owner_flow(scenario, &end.ids, start_prev, end_step)?,
                ids: end.ids.clone(),
            })
        })
        .collect()
}

fn build_class(
    scenario: &Scenario,
    class: AgentClass,
    mode: LabelMode,
    selection: &BTreeSet<AgentId>,
) -> Result<LabelSet> {
    let spec = &scenario.spec;
    let current = render_frame_with(scenario, 0, class, Some(selection))?;
    let steps: Vec<LabeledFrame> = (1..=spec.last_step())
        .into_par_iter()
        .map(|t| render_frame_with(scenario, t, class, Some(selection)))
        .collect::<Result<_>>()?;
    let waypoints = aggregate_waypoints(scenario, &steps, spec.aggregation_factor)?;
    Ok(LabelSet {
        class,
        mode,
        current,
        waypoints,
    })
}

/// Builds labels for every class. Speculative labels use only agents never
/// observed in the past, so their current frame is empty.
pub fn build_labels(scenario: &Scenario, mode: LabelMode) -> Result<Labels> {
    let selection = agents_for_mode(scenario, mode);
    let classes = AgentClass::ALL
        .iter()
        .map(|&class| Ok((class, build_class(scenario, class, mode, &selection)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Labels {
        spec: scenario.spec.clone(),
        mode,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;
    use crate::scene::{AgentState, AgentTrack};

    fn spec(factor: usize, waypoints: usize) -> GridSpec {
        GridSpec {
            height: 20,
            width: 20,
            cell_size: 1.0,
            origin: [0.0, 0.0],
            num_waypoints: waypoints,
            input_steps: 2,
            aggregation_factor: factor,
            step_seconds: 0.1,
        }
    }

    fn state(x: f64, y: f64, heading: f64) -> AgentState {
        AgentState {
            center: Vec2::new(x, y),
            heading,
            width: 2.0,
            length: 4.0,
            velocity: Vec2::zeros(),
            acceleration: Vec2::zeros(),
            valid: true,
        }
    }

    fn scenario_of(spec: GridSpec, tracks: Vec<(AgentId, AgentClass, Vec<AgentState>)>) -> Scenario {
        let first = spec.first_step();
        let tracks = tracks
            .into_iter()
            .map(|(id, class, states)| AgentTrack::new(id, class, first, states).unwrap())
            .collect();
        Scenario::new(spec, tracks).unwrap()
    }

    fn translating(spec: &GridSpec, x0: f64, y: f64, step: f64) -> Vec<AgentState> {
        (spec.first_step()..=spec.last_step())
            .map(|t| state(x0 + step * t as f64, y, 0.0))
            .collect()
    }

    #[test]
    fn empty_scene_renders_zero() {
        let s = scenario_of(spec(1, 2), vec![]);
        let (occ, ids) = render_occupancy(&s, 0, AgentClass::Vehicle).unwrap();
        assert_eq!(occ.sum(), 0.0);
        assert!(ids.data().iter().all(|&i| i == 0));
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        let s = scenario_of(spec(1, 2), vec![]);
        assert!(matches!(
            render_occupancy(&s, 3, AgentClass::Vehicle),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(render_backward_flow(&s, -1, AgentClass::Vehicle).is_err());
    }

    #[test]
    fn single_agent_matches_box_cells() {
        let sp = spec(1, 2);
        let states = translating(&sp, 6.3, 7.7, 0.0);
        let s = scenario_of(sp.clone(), vec![(4, AgentClass::Vehicle, states.clone())]);
        let (occ, ids) = render_occupancy(&s, 0, AgentClass::Vehicle).unwrap();
        let cells = box_cells(&states[1].oriented_box(), &sp);
        assert_eq!(occ.sum() as usize, cells.len());
        for (x, y) in cells {
            assert_eq!(occ.get(x, y), 1.0);
            assert_eq!(*ids.get(x, y), 4);
        }
        // Other class is empty.
        let (ped, _) = render_occupancy(&s, 0, AgentClass::Pedestrian).unwrap();
        assert_eq!(ped.sum(), 0.0);
    }

    #[test]
    fn overlap_goes_to_smaller_id() {
        let sp = spec(1, 2);
        let s = scenario_of(
            sp.clone(),
            vec![
                (9, AgentClass::Vehicle, translating(&sp, 8.0, 8.0, 0.0)),
                (5, AgentClass::Vehicle, translating(&sp, 10.0, 8.0, 0.0)),
            ],
        );
        let (_, ids) = render_occupancy(&s, 0, AgentClass::Vehicle).unwrap();
        let a: BTreeSet<_> = box_cells(&state(8.0, 8.0, 0.0).oriented_box(), &sp)
            .into_iter()
            .collect();
        let b: BTreeSet<_> = box_cells(&state(10.0, 8.0, 0.0).oriented_box(), &sp)
            .into_iter()
            .collect();
        let shared: Vec<_> = a.intersection(&b).collect();
        assert!(!shared.is_empty());
        for &(x, y) in shared {
            assert_eq!(*ids.get(x, y), 5);
        }
        for &(x, y) in a.difference(&b) {
            assert_eq!(*ids.get(x, y), 9);
        }
    }

    #[test]
    fn static_agent_has_zero_flow() {
        let sp = spec(1, 2);
        let s = scenario_of(sp.clone(), vec![(1, AgentClass::Vehicle, translating(&sp, 7.2, 9.1, 0.0))]);
        let f = render_backward_flow(&s, 2, AgentClass::Vehicle).unwrap();
        assert!(f.vectors().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn translation_by_three_cells() {
        let sp = spec(1, 2);
        let s = scenario_of(sp.clone(), vec![(1, AgentClass::Vehicle, translating(&sp, 5.0, 9.0, 3.0))]);
        let (occ, _) = render_occupancy(&s, 1, AgentClass::Vehicle).unwrap();
        let f = render_backward_flow(&s, 1, AgentClass::Vehicle).unwrap();
        for (v, o) in f.vectors().iter().zip(occ.values()) {
            if *o == 1.0 {
                assert!((v - Vec2::new(-3.0, 0.0)).norm() < 1e-12);
            } else {
                assert_eq!(*v, Vec2::zeros());
            }
        }
    }

    #[test]
    fn quarter_turn_flow_matches_rotation() {
        let sp = spec(1, 2);
        let c = Vec2::new(10.0, 10.0);
        let mut states = vec![state(c.x, c.y, 0.0); 4];
        states[2].heading = FRAC_PI_2; // t = 1
        let s = scenario_of(sp.clone(), vec![(1, AgentClass::Vehicle, states)]);
        let (occ, _) = render_occupancy(&s, 1, AgentClass::Vehicle).unwrap();
        let f = render_backward_flow(&s, 1, AgentClass::Vehicle).unwrap();
        let mut checked = 0;
        for y in 0..sp.height {
            for x in 0..sp.width {
                if occ.get(x, y) == 0.0 {
                    continue;
                }
                let r = sp.cell_center_world(x, y) - c;
                // R(-pi/2) r = (r.y, -r.x)
                let expected = Vec2::new(r.y, -r.x) - r;
                assert!((f.get(x, y) - expected).norm() < 1e-6);
                checked += 1;
            }
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn unobserved_previous_step_gives_zero_flow_but_occupied() {
        let sp = spec(1, 2);
        let mut states = translating(&sp, 5.0, 9.0, 1.0);
        states[1].valid = false; // t = 0
        let s = scenario_of(sp.clone(), vec![(1, AgentClass::Vehicle, states)]);
        let (occ, _) = render_occupancy(&s, 1, AgentClass::Vehicle).unwrap();
        let f = render_backward_flow(&s, 1, AgentClass::Vehicle).unwrap();
        assert!(occ.sum() > 0.0);
        assert!(f.vectors().iter().all(|v| *v == Vec2::zeros()));
    }

    #[test]
    fn factor_one_aggregation_is_identity() {
        let sp = spec(1, 3);
        let s = scenario_of(sp.clone(), vec![(1, AgentClass::Vehicle, translating(&sp, 4.0, 9.0, 1.3))]);
        let frames: Vec<_> = (1..=3)
            .map(|t| render_frame(&s, t, AgentClass::Vehicle, None).unwrap())
            .collect();
        let agg = aggregate_waypoints(&s, &frames, 1).unwrap();
        assert_eq!(agg, frames);
    }

    #[test]
    fn constant_velocity_window_flow() {
        let sp = spec(3, 2);
        let s = scenario_of(sp.clone(), vec![(1, AgentClass::Vehicle, translating(&sp, 4.0, 9.0, 1.0))]);
        let frames: Vec<_> = (1..=6)
            .map(|t| render_frame(&s, t, AgentClass::Vehicle, None).unwrap())
            .collect();
        let agg = aggregate_waypoints(&s, &frames, 3).unwrap();
        assert_eq!(agg.len(), 2);
        for (w, wp) in agg.iter().enumerate() {
            let end = &frames[3 * w + 2];
            assert_eq!(wp.ids, end.ids);
            for (v, id) in wp.flow.vectors().iter().zip(end.ids.data()) {
                if *id != 0 {
                    assert!((v - Vec2::new(-3.0, 0.0)).norm() < 1e-12);
                }
            }
            // Max over the window covers every member frame.
            for f in &frames[3 * w..3 * w + 3] {
                for (a, b) in wp.occupancy.values().iter().zip(f.occupancy.values()) {
                    assert!(a >= b);
                }
            }
        }
        assert!(aggregate_waypoints(&s, &frames[..5], 3).is_err());
    }

    #[test]
    fn static_scene_aggregation() {
        let sp = spec(3, 2);
        let s = scenario_of(sp.clone(), vec![(2, AgentClass::Pedestrian, translating(&sp, 4.0, 9.0, 0.0))]);
        let labels = build_labels(&s, LabelMode::Regular).unwrap();
        let set = labels.class(AgentClass::Pedestrian).unwrap();
        for wp in &set.waypoints {
            assert_eq!(wp.occupancy, set.current.occupancy);
            assert!(wp.flow.vectors().iter().all(|v| *v == Vec2::zeros()));
        }
    }

    #[test]
    fn label_modes_partition_agents() {
        let sp = spec(1, 3);
        let always = translating(&sp, 4.0, 4.0, 0.0);
        let mut late = translating(&sp, 12.0, 12.0, 0.0);
        for s in late.iter_mut().take(3) {
            s.valid = false; // t = -1, 0, 1
        }
        let mut once = translating(&sp, 4.0, 14.0, 0.0);
        once[1].valid = false; // only t = -1 observed in the past
        let s = scenario_of(
            sp.clone(),
            vec![
                (1, AgentClass::Vehicle, always),
                (2, AgentClass::Vehicle, late),
                (3, AgentClass::Vehicle, once),
            ],
        );
        assert_eq!(regular_agents(&s), BTreeSet::from([1, 3]));
        assert_eq!(speculative_agents(&s), BTreeSet::from([2]));

        let reg = build_labels(&s, LabelMode::Regular).unwrap();
        let spec_labels = build_labels(&s, LabelMode::Speculative).unwrap();
        let rv = reg.class(AgentClass::Vehicle).unwrap();
        let sv = spec_labels.class(AgentClass::Vehicle).unwrap();
        assert_eq!(sv.current.occupancy.sum(), 0.0);
        assert!(sv.waypoints[0].agent_ids().is_empty());
        assert_eq!(sv.waypoints[1].agent_ids(), BTreeSet::from([2]));
        assert_eq!(rv.waypoints[1].agent_ids(), BTreeSet::from([1, 3]));
        assert_eq!(rv.current.agent_ids(), BTreeSet::from([1]));
    }
}
