//! Hand-computed values and independent re-implementations.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use occflow_core::grid::{AgentClass, FlowField, Grid, GridSpec, OccupancyGrid, Vec2};
use occflow_core::labels::{render_backward_flow, render_occupancy, LabelMode, LabelSet, LabeledFrame, Labels};
use occflow_core::losses::{loss_gradients, total_loss, ClassPrediction, LossOptions, LossWeights, Prediction};
use occflow_core::metrics::{auc_with, epe, soft_iou};
use occflow_core::scene::{AgentState, AgentTrack, Scenario};
use occflow_core::warp::{warp_once, WarpedOccupancy};

fn unit_spec(width: usize, height: usize, waypoints: usize) -> GridSpec {
    GridSpec {
        height,
        width,
        cell_size: 1.0,
        origin: [0.0, 0.0],
        num_waypoints: waypoints,
        input_steps: 1,
        aggregation_factor: 1,
        step_seconds: 0.1,
    }
}

fn state(center: Vec2, heading: f64, width: f64, length: f64, velocity: Vec2) -> AgentState {
    AgentState {
        center,
        heading,
        width,
        length,
        velocity,
        acceleration: Vec2::zeros(),
        valid: true,
    }
}

fn single_agent(spec: GridSpec, states: Vec<AgentState>) -> Scenario {
    let track = AgentTrack::new(1, AgentClass::Vehicle, spec.first_step(), states).unwrap();
    Scenario::new(spec, vec![track]).unwrap()
}

#[test]
fn auc_hand_example() {
    // Eleven thresholds 0, 0.1, .., 1. Curve points (0, 1), (0.5, 1), (1, 2/3).
    let pred = Grid::from_vec(4, 1, vec![0.9, 0.8, 0.3, 0.1]).unwrap();
    let label = Grid::from_vec(4, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let area = auc_with(&pred, &label, 11).unwrap().unwrap();
    assert!((area - 11.0 / 12.0).abs() < 1e-12, "{area}");
}

#[test]
fn auc_without_positives_is_undefined() {
    let pred = Grid::filled(3, 3, 0.7);
    let label = Grid::filled(3, 3, 0.0);
    assert_eq!(auc_with(&pred, &label, 100).unwrap(), None);
}

#[test]
fn soft_iou_hand_example() {
    let pred = OccupancyGrid::from_vec(3, 1, vec![0.5, 1.0, 0.0]).unwrap();
    let label = OccupancyGrid::from_vec(3, 1, vec![1.0, 1.0, 0.0]).unwrap();
    assert!((soft_iou(&pred, &label).unwrap() - 0.75).abs() < 1e-15);
    let empty = OccupancyGrid::zeros(3, 1);
    assert_eq!(soft_iou(&empty, &empty).unwrap(), 0.0);
}

#[test]
fn epe_averages_over_occupied_cells_only() {
    let pred = FlowField::new(Grid::from_vec(3, 1, vec![Vec2::new(3.0, 4.0), Vec2::zeros(), Vec2::new(50.0, 0.0)]).unwrap()).unwrap();
    let label = FlowField::zeros(3, 1);
    let occ = OccupancyGrid::from_vec(3, 1, vec![1.0, 1.0, 0.0]).unwrap();
    assert_eq!(epe(&pred, &label, &occ).unwrap(), Some(2.5));
    assert_eq!(epe(&pred, &label, &OccupancyGrid::zeros(3, 1)).unwrap(), None);
}

/// Positive-area overlap of a convex quad and the unit cell by separating axes.
fn sat_overlap(quad: &[Vec2; 4], cx: f64, cy: f64) -> bool {
    let square = [
        Vec2::new(cx, cy),
        Vec2::new(cx + 1.0, cy),
        Vec2::new(cx + 1.0, cy + 1.0),
        Vec2::new(cx, cy + 1.0),
    ];
    let mut axes = vec![Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
    for i in 0..4 {
        let e = quad[(i + 1) % 4] - quad[i];
        axes.push(Vec2::new(-e.y, e.x).normalize());
    }
    axes.iter().all(|a| {
        let span = |pts: &[Vec2]| {
            pts.iter()
                .map(|p| p.dot(a))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)))
        };
        let (a0, a1) = span(quad);
        let (b0, b1) = span(&square);
        a1.min(b1) - a0.max(b0) > 1e-7
    })
}

fn box_corners(center: Vec2, heading: f64, width: f64, length: f64) -> [Vec2; 4] {
    let (s, c) = heading.sin_cos();
    let u = Vec2::new(c, s) * (0.5 * length);
    let v = Vec2::new(-s, c) * (0.5 * width);
    [center - u - v, center + u - v, center + u + v, center - u + v]
}

#[test]
fn rotated_boxes_match_separating_axis_oracle() {
    let cases = [
        (Vec2::new(10.3, 9.7), FRAC_PI_4, 3.0, 5.0),
        (Vec2::new(8.05, 11.2), PI / 6.0, 1.1, 4.3),
        (Vec2::new(12.5, 7.5), -1.1, 0.7, 0.9),
    ];
    for (center, heading, width, length) in cases {
        let spec = unit_spec(20, 20, 1);
        let s = single_agent(spec.clone(), vec![state(center, heading, width, length, Vec2::zeros()); 2]);
        let (occ, ids) = render_occupancy(&s, 0, AgentClass::Vehicle).unwrap();
        let quad = box_corners(center, heading, width, length);
        for y in 0..20 {
            for x in 0..20 {
                let expected = sat_overlap(&quad, x as f64, y as f64);
                assert_eq!(occ.get(x, y) == 1.0, expected, "cell ({x}, {y}) heading {heading}");
                assert_eq!(*ids.get(x, y) == 1, expected);
            }
        }
    }
}

#[test]
fn translating_agent_flow_is_minus_displacement() {
    let spec = unit_spec(30, 30, 2);
    let v = Vec2::new(7.0, -4.0);
    let states: Vec<_> = (0..3)
        .map(|t| state(Vec2::new(12.0, 15.0) + v * (0.1 * t as f64), 0.4, 2.0, 4.5, v))
        .collect();
    let s = single_agent(spec, states);
    let flow = render_backward_flow(&s, 2, AgentClass::Vehicle).unwrap();
    let (occ, _) = render_occupancy(&s, 2, AgentClass::Vehicle).unwrap();
    let mut owned = 0;
    for y in 0..30 {
        for x in 0..30 {
            let f = flow.get(x, y);
            if occ.get(x, y) == 1.0 {
                owned += 1;
                assert!((f - Vec2::new(-0.7, 0.4)).norm() < 1e-12, "{f:?}");
            } else {
                assert_eq!(f, Vec2::zeros());
            }
        }
    }
    assert!(owned > 8);
}

#[test]
fn turning_agent_flow_rotates_about_its_center() {
    let spec = unit_spec(30, 30, 1);
    let center = Vec2::new(15.0, 15.0);
    let states = vec![
        state(center, 0.0, 2.0, 6.0, Vec2::zeros()),
        state(center, FRAC_PI_2, 2.0, 6.0, Vec2::zeros()),
    ];
    let s = single_agent(spec.clone(), states);
    let flow = render_backward_flow(&s, 1, AgentClass::Vehicle).unwrap();
    let (occ, _) = render_occupancy(&s, 1, AgentClass::Vehicle).unwrap();
    for y in 0..30 {
        for x in 0..30 {
            if occ.get(x, y) != 1.0 {
                continue;
            }
            // Undo a quarter turn: (dx, dy) -> (dy, -dx).
            let d = spec.cell_center_world(x, y) - center;
            let before = center + Vec2::new(d.y, -d.x);
            let expected = before - spec.cell_center_world(x, y);
            assert!((flow.get(x, y) - expected).norm() < 1e-12);
        }
    }
}

#[test]
fn half_cell_pull_splits_mass() {
    let mut values = Grid::filled(5, 5, 0.0);
    values.set(2, 2, 1.0);
    let mut ids = Grid::filled(5, 5, 0u32);
    ids.set(2, 2, 9);
    let prev = WarpedOccupancy::new(OccupancyGrid::new(values).unwrap(), ids).unwrap();
    let flow = FlowField::uniform(5, 5, Vec2::new(0.5, 0.0)).unwrap();
    let next = warp_once(&flow, &prev).unwrap();
    for y in 0..5 {
        for x in 0..5 {
            let expected = if y == 2 && (x == 1 || x == 2) { 0.5 } else { 0.0 };
            assert_eq!(next.value(x, y), expected, "({x}, {y})");
            assert_eq!(next.id(x, y), if expected > 0.0 { 9 } else { 0 });
        }
    }
}

fn one_class_labels(spec: GridSpec, current: LabeledFrame, waypoints: Vec<LabeledFrame>) -> Labels {
    Labels {
        spec,
        mode: LabelMode::Regular,
        classes: BTreeMap::from([(
            AgentClass::Vehicle,
            LabelSet {
                class: AgentClass::Vehicle,
                mode: LabelMode::Regular,
                current,
                waypoints,
            },
        )]),
    }
}

#[test]
fn single_cell_loss_by_hand() {
    let spec = unit_spec(1, 1, 1);
    let occupied = LabeledFrame {
        occupancy: OccupancyGrid::filled(1, 1, 1.0).unwrap(),
        flow: FlowField::zeros(1, 1),
        ids: Grid::filled(1, 1, 1),
    };
    let labels = one_class_labels(spec.clone(), occupied.clone(), vec![occupied]);
    let occ = OccupancyGrid::filled(1, 1, 0.8).unwrap();
    let flow = FlowField::uniform(1, 1, Vec2::new(0.5, -0.25)).unwrap();
    let pred = Prediction {
        spec,
        classes: BTreeMap::from([(AgentClass::Vehicle, ClassPrediction::from_probabilities(&[occ], vec![flow]).unwrap())]),
    };
    // Zero pull offset lands on the occupied cell at a lattice point, so W = 1.
    let r = total_loss(&pred, &labels, &LossWeights::default()).unwrap();
    let ce = -(0.8f64).ln();
    assert!((r.l_occupancy - ce).abs() < 1e-9);
    assert!((r.l_flow - 0.75).abs() < 1e-12);
    assert!((r.total - (1000.0 * r.l_occupancy + 0.75 + 1000.0 * r.l_trace)).abs() < 1e-9);
}

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LabeledFrame {
    let ids = Grid::from_fn(w, h, |_, _| if rng.random::<f64>() < 0.5 { rng.random_range(1..3) } else { 0 });
    LabeledFrame {
        occupancy: OccupancyGrid::new(ids.map(|&i| if i != 0 { 1.0 } else { 0.0 })).unwrap(),
        flow: FlowField::new(Grid::from_fn(w, h, |_, _| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))).unwrap(),
        ids,
    }
}

/// Offset at least `gap` from lattice lines and from `target`.
fn away_from_kinks(rng: &mut ChaCha8Rng, target: f64, gap: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(-1.2..1.2);
        let frac = v - v.floor();
        if frac > gap && frac < 1.0 - gap && (v - target).abs() > gap {
            return v;
        }
    }
}

#[test]
fn gradients_match_central_differences_on_two_classes() {
    let (w, h, steps) = (5, 4, 2);
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = unit_spec(w, h, steps);
        let mut label_sets = BTreeMap::new();
        let mut pred_classes = BTreeMap::new();
        for class in AgentClass::ALL {
            let current = random_frame(&mut rng, w, h);
            let waypoints: Vec<_> = (0..steps).map(|_| random_frame(&mut rng, w, h)).collect();
            let logits = (0..steps).map(|_| Grid::from_fn(w, h, |_, _| rng.random_range(-2.0..2.0))).collect();
            let flows = waypoints
                .iter()
                .map(|wp| {
                    FlowField::new(Grid::from_fn(w, h, |x, y| {
                        let target = wp.flow.get(x, y);
                        Vec2::new(away_from_kinks(&mut rng, target.x, 0.02), away_from_kinks(&mut rng, target.y, 0.02))
                    }))
                    .unwrap()
                })
                .collect();
            pred_classes.insert(class, ClassPrediction::new(logits, flows).unwrap());
            label_sets.insert(
                class,
                LabelSet {
                    class,
                    mode: LabelMode::Regular,
                    current,
                    waypoints,
                },
            );
        }
        let labels = Labels {
            spec: spec.clone(),
            mode: LabelMode::Regular,
            classes: label_sets,
        };
        let pred = Prediction {
            spec,
            classes: pred_classes,
        };
        let weights = LossWeights::default();
        let grads = loss_gradients(&pred, &labels, &weights, &LossOptions::default()).unwrap();
        let loss = |p: &Prediction| total_loss(p, &labels, &weights).unwrap().total;
        let eps = 1e-4;
        for class in AgentClass::ALL {
            let g = &grads.classes[&class];
            for t in 0..steps {
                for y in 0..h {
                    for x in 0..w {
                        let mut plus = pred.clone();
                        let mut minus = pred.clone();
                        for (p, d) in [(&mut plus, eps), (&mut minus, -eps)] {
                            let grid = &mut p.classes.get_mut(&class).unwrap().logits_mut()[t];
                            let z = *grid.get(x, y);
                            grid.set(x, y, z + d);
                        }
                        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                        let analytic = *g.occupancy_logits[t].get(x, y);
                        assert!((numeric - analytic).abs() <= 1e-3 * analytic.abs().max(1e-3), "logit {class:?} {t} ({x},{y}): {analytic} vs {numeric}");

                        for k in 0..2 {
                            let mut plus = pred.clone();
                            let mut minus = pred.clone();
                            for (p, d) in [(&mut plus, eps), (&mut minus, -eps)] {
                                let cp = p.classes.get_mut(&class).unwrap();
                                let mut v = cp.flows()[t].get(x, y);
                                v[k] += d;
                                cp.set_flow(t, x, y, v).unwrap();
                            }
                            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                            let analytic = g.flows[t].get(x, y)[k];
                            assert!((numeric - analytic).abs() <= 1e-3 * analytic.abs().max(1e-3), "flow {class:?} {t} ({x},{y},{k}): {analytic} vs {numeric}");
                        }
                    }
                }
            }
        }
    }
}
