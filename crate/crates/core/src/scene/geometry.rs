//! Oriented boxes, planar rigid motion and exact box/cell overlap.

use nalgebra::{Isometry2, Point2, UnitComplex};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Vec2};

use super::AgentState;

/// Clipped areas at or below this many square cells count as edge contact.
const AREA_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub half_width: f64,
    pub half_length: f64,
}

impl OrientedBox {
    /// Corners `center + R(heading) * (+-half_length, +-half_width)`, counter-clockwise.
    pub fn corners(&self) -> [Vec2; 4] {
        let rot = UnitComplex::new(self.heading);
        let (l, w) = (self.half_length, self.half_width);
        [
            Vec2::new(l, -w),
            Vec2::new(l, w),
            Vec2::new(-l, w),
            Vec2::new(-l, -w),
        ]
        .map(|c| self.center + rot * c)
    }

    /// Whether a world point lies strictly inside the box.
    pub fn contains(&self, p: Vec2) -> bool {
        let local = UnitComplex::new(-self.heading) * (p - self.center);
        local.x.abs() < self.half_length && local.y.abs() < self.half_width
    }

    pub fn half_diagonal(&self) -> f64 {
        self.half_width.hypot(self.half_length)
    }
}

/// Planar rotation plus translation, applied as `R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(Isometry2<f64>);

impl RigidTransform {
    pub fn identity() -> Self {
        Self(Isometry2::identity())
    }

    pub fn new(rotation: f64, translation: Vec2) -> Self {
        Self(Isometry2::new(translation, rotation))
    }

    /// Pose of a box frame: local box coordinates to world.
    pub fn pose(center: Vec2, heading: f64) -> Self {
        Self::new(heading, center)
    }

    pub fn rotation(&self) -> f64 {
        self.0.rotation.angle()
    }

    pub fn translation(&self) -> Vec2 {
        self.0.translation.vector
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        (self.0 * Point2::from(p)).coords
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self(self.0 * other.0)
    }

    pub fn inverse(&self) -> RigidTransform {
        Self(self.0.inverse())
    }
}

/// The rigid transform carrying the box of `to` onto the box of `from`.
///
/// Only center and heading take part; extent changes between the two states
/// are ignored, so a point is mapped through the box-local frame of `to`.
pub fn rigid_transform_between(from: &AgentState, to: &AgentState) -> Result<RigidTransform> {
    if !from.valid || !to.valid {
        return Err(Error::StateNotObserved);
    }
    let from_pose = RigidTransform::pose(from.center, from.heading);
    let to_pose = RigidTransform::pose(to.center, to.heading);
    Ok(from_pose.compose(&to_pose.inverse()))
}

fn clip_half_plane(poly: &[Vec2], inside: impl Fn(Vec2) -> f64) -> Vec<Vec2> {
    // `inside(p) >= 0` keeps the point; crossing points are interpolated on the
    // signed distance.
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (da, db) = (inside(a), inside(b));
        if da >= 0.0 {
            out.push(a);
        }
        if (da >= 0.0) != (db >= 0.0) {
            let s = da / (da - db);
            out.push(a + (b - a) * s);
        }
    }
    out
}

fn polygon_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum();
    0.5 * twice.abs()
}

/// Area of a convex polygon (grid coordinates) inside the unit square of cell `(cx, cy)`.
pub fn clipped_cell_area(poly: &[Vec2], cx: f64, cy: f64) -> f64 {
    let mut p = poly.to_vec();
    p = clip_half_plane(&p, |q| q.x - cx);
    p = clip_half_plane(&p, |q| cx + 1.0 - q.x);
    p = clip_half_plane(&p, |q| q.y - cy);
    p = clip_half_plane(&p, |q| cy + 1.0 - q.y);
    polygon_area(&p)
}

fn grid_corners(b: &OrientedBox, spec: &GridSpec) -> [Vec2; 4] {
    b.corners().map(|c| spec.world_to_grid(c))
}

/// Whether the box and the cell intersect with positive area.
pub fn box_cell_overlap(b: &OrientedBox, spec: &GridSpec, cell: (usize, usize)) -> bool {
    let poly = grid_corners(b, spec);
    clipped_cell_area(&poly, cell.0 as f64, cell.1 as f64) > AREA_EPSILON
}

/// Every in-grid cell the box overlaps with positive area, in row-major order.
pub fn box_cells(b: &OrientedBox, spec: &GridSpec) -> Vec<(usize, usize)> {
    let poly = grid_corners(b, spec);
    let (mut lo, mut hi) = (poly[0], poly[0]);
    for p in &poly[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let x_range = cell_range(lo.x, hi.x, spec.width);
    let y_range = cell_range(lo.y, hi.y, spec.height);
    let mut cells = Vec::new();
    for y in y_range {
        for x in x_range.clone() {
            if clipped_cell_area(&poly, x as f64, y as f64) > AREA_EPSILON {
                cells.push((x, y));
            }
        }
    }
    cells
}

fn cell_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    if !(lo.is_finite() && hi.is_finite()) || hi <= 0.0 || lo >= n as f64 {
        return 0..0;
    }
    let start = lo.floor().max(0.0) as usize;
    let end = (hi.ceil().min(n as f64)) as usize;
    start..end.max(start)
}

/// Normalizes an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    use super::*;

    fn unit_spec(n: usize) -> GridSpec {
        GridSpec {
            height: n,
            width: n,
            cell_size: 1.0,
            origin: [0.0, 0.0],
            ..GridSpec::default()
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

    #[test]
    fn identical_states_give_identity() {
        let a = state(3.0, -1.0, 0.7);
        let t = rigid_transform_between(&a, &a).unwrap();
        assert!(t.rotation().abs() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
    }

    #[test]
    fn translation_only() {
        let b = state(1.0, 1.0, 0.3);
        let a = state(3.0, 1.0, 0.3);
        let t = rigid_transform_between(&a, &b).unwrap();
        assert!(t.rotation().abs() < 1e-12);
        assert!((t.translation() - Vec2::new(2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_about_center() {
        let b = state(0.0, 0.0, 0.0);
        let a = state(0.0, 0.0, FRAC_PI_2);
        let t = rigid_transform_between(&a, &b).unwrap();
        assert!((t.rotation() - FRAC_PI_2).abs() < 1e-12);
        assert!(t.translation().norm() < 1e-12);

        // Off-origin pivot: the center is a fixed point.
        let b = state(5.0, 2.0, 0.0);
        let a = state(5.0, 2.0, FRAC_PI_2);
        let t = rigid_transform_between(&a, &b).unwrap();
        assert!((t.apply(b.center) - b.center).norm() < 1e-12);
        assert!((t.apply(Vec2::new(6.0, 2.0)) - Vec2::new(5.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_state_is_rejected() {
        let mut a = state(0.0, 0.0, 0.0);
        a.valid = false;
        let b = state(0.0, 0.0, 0.0);
        assert!(matches!(
            rigid_transform_between(&a, &b),
            Err(Error::StateNotObserved)
        ));
    }

    #[test]
    fn axis_aligned_box_on_grid_node_covers_2x2_block() {
        let spec = unit_spec(6);
        let b = OrientedBox {
            center: Vec2::new(3.0, 3.0),
            heading: 0.0,
            half_width: 1.0,
            half_length: 1.0,
        };
        assert_eq!(box_cells(&b, &spec), vec![(2, 2), (3, 2), (2, 3), (3, 3)]);
    }

    #[test]
    fn box_inside_one_cell() {
        let spec = unit_spec(4);
        let b = OrientedBox {
            center: Vec2::new(1.5, 2.5),
            heading: 0.4,
            half_width: 0.1,
            half_length: 0.2,
        };
        assert_eq!(box_cells(&b, &spec), vec![(1, 2)]);
        assert!(box_cell_overlap(&b, &spec, (1, 2)));
        assert!(!box_cell_overlap(&b, &spec, (2, 2)));
    }

    #[test]
    fn box_partly_outside_grid_is_clipped() {
        let spec = unit_spec(4);
        let b = OrientedBox {
            center: Vec2::new(0.0, 0.0),
            heading: FRAC_PI_4,
            half_width: 1.0,
            half_length: 1.0,
        };
        let cells = box_cells(&b, &spec);
        assert!(cells.contains(&(0, 0)));
        assert!(cells.iter().all(|&(x, y)| x < 4 && y < 4));
    }

    #[test]
    fn heading_flip_is_symmetric() {
        let spec = unit_spec(10);
        let b = OrientedBox {
            center: Vec2::new(4.3, 5.1),
            heading: 0.37,
            half_width: 0.9,
            half_length: 2.2,
        };
        let flipped = OrientedBox {
            heading: b.heading + PI,
            ..b
        };
        assert_eq!(box_cells(&b, &spec), box_cells(&flipped, &spec));
    }

    #[test]
    fn angle_normalization() {
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((normalize_angle(-0.5 - 2.0 * PI) + 0.5).abs() < 1e-12);
    }
}
