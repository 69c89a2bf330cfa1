//! Dense grid value types, the world/grid coordinate mapping and bilinear sampling.
//!
//! Storage is row-major with `x` as the column and `y` as the row. Sample
//! coordinates put the center of cell `(x, y)` at the continuous point
//! `(x, y)`, so a backward-flow vector can be added to a cell index directly
//! to obtain the point it pulls from.

use std::fmt;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Grid of agent IDs, `0` meaning "no agent".
pub type IdGrid = Grid<u32>;

fn default_step_seconds() -> f64 {
    0.1
}

/// Geometry and time layout shared by every grid of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub cell_size: f64,
    /// World coordinates (meters) of the outer corner of cell `(0, 0)`.
    pub origin: [f64; 2],
    pub num_waypoints: usize,
    /// Number of observed steps, `t = -(input_steps - 1) ..= 0`.
    pub input_steps: usize,
    /// Dataset steps folded into one prediction waypoint.
    pub aggregation_factor: usize,
    /// Seconds between dataset steps.
    #[serde(default = "default_step_seconds")]
    pub step_seconds: f64,
}

impl Default for GridSpec {
    /// 400 x 400 cells of 0.2 m covering 80 m x 80 m, 10 waypoints of 3 steps
    /// each and 5 observed steps.
    fn default() -> Self {
        Self {
            height: 400,
            width: 400,
            cell_size: 0.2,
            origin: [-40.0, -40.0],
            num_waypoints: 10,
            input_steps: 5,
            aggregation_factor: 3,
            step_seconds: default_step_seconds(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("height", self.height),
            ("width", self.width),
            ("num_waypoints", self.num_waypoints),
            ("input_steps", self.input_steps),
            ("aggregation_factor", self.aggregation_factor),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be at least 1")));
            }
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::InvalidSpec("cell_size must be positive".into()));
        }
        if !(self.step_seconds.is_finite() && self.step_seconds > 0.0) {
            return Err(Error::InvalidSpec("step_seconds must be positive".into()));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// First observed dataset step (non-positive).
    pub fn first_step(&self) -> i64 {
        1 - self.input_steps as i64
    }

    /// Last future dataset step.
    pub fn last_step(&self) -> i64 {
        self.future_steps() as i64
    }

    pub fn future_steps(&self) -> usize {
        self.num_waypoints * self.aggregation_factor
    }

    /// Dataset step at which waypoint `index` (1-based) ends.
    pub fn waypoint_end_step(&self, index: usize) -> i64 {
        (index * self.aggregation_factor) as i64
    }

    /// Seconds spanned by one waypoint.
    pub fn waypoint_seconds(&self) -> f64 {
        self.step_seconds * self.aggregation_factor as f64
    }

    /// Affine world-to-grid map: cell `(x, y)` covers `[x, x + 1) x [y, y + 1)`.
    pub fn world_to_grid(&self, world: Vec2) -> Vec2 {
        Vec2::new(
            (world.x - self.origin[0]) / self.cell_size,
            (world.y - self.origin[1]) / self.cell_size,
        )
    }

    pub fn grid_to_world(&self, grid: Vec2) -> Vec2 {
        Vec2::new(
            self.origin[0] + grid.x * self.cell_size,
            self.origin[1] + grid.y * self.cell_size,
        )
    }

    /// World point in sample coordinates (cell centers at integers).
    pub fn world_to_sample(&self, world: Vec2) -> Vec2 {
        self.world_to_grid(world) - Vec2::new(0.5, 0.5)
    }

    pub fn cell_center_world(&self, x: usize, y: usize) -> Vec2 {
        self.grid_to_world(Vec2::new(x as f64 + 0.5, y as f64 + 0.5))
    }

    /// Errors unless both specs describe the same grid geometry and horizon.
    pub fn ensure_compatible(&self, other: &GridSpec) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::SpecMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        if self.num_waypoints != other.num_waypoints {
            return Err(Error::SpecMismatch(format!(
                "{} vs {} waypoints",
                self.num_waypoints, other.num_waypoints
            )));
        }
        Ok(())
    }
}

/// Row-major dense grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[self.index(x, y)]
    }

    /// Value at signed coordinates, `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> Option<&T> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(&self.data[y as usize * self.width + x as usize])
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

/// Occupancy probabilities, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid(Grid<f64>);

impl OccupancyGrid {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if let Some(v) = values
            .data()
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidValue(format!(
                "occupancy value {v} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 0.0))
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(Grid::filled(width, height, value))
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Grid::from_vec(width, height, values)?)
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn clamped(values: Grid<f64>) -> Self {
        Self(values.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        *self.0.get(x, y)
    }

    pub fn sum(&self) -> f64 {
        self.values().iter().sum()
    }

    /// Element-wise product of two occupancy grids.
    pub fn product(&self, other: &OccupancyGrid) -> Result<OccupancyGrid> {
        self.0.ensure_same_shape(&other.0)?;
        let data = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Self(Grid::from_vec(self.width(), self.height(), data)?))
    }
}

/// Per-cell 2-D vectors in grid-cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Grid<Vec2>);

impl FlowField {
    pub fn new(vectors: Grid<Vec2>) -> Result<Self> {
        if vectors
            .data()
            .iter()
            .any(|v| !(v.x.is_finite() && v.y.is_finite()))
        {
            return Err(Error::InvalidValue("flow vector is not finite".into()));
        }
        Ok(Self(vectors))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, Vec2::zeros()))
    }

    pub fn uniform(width: usize, height: usize, v: Vec2) -> Result<Self> {
        Self::new(Grid::filled(width, height, v))
    }

    pub fn grid(&self) -> &Grid<Vec2> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<Vec2> {
        self.0
    }

    pub fn vectors(&self) -> &[Vec2] {
        self.0.data()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn get(&self, x: usize, y: usize) -> Vec2 {
        *self.0.get(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
}

impl AgentClass {
    pub const ALL: [AgentClass; 2] = [AgentClass::Vehicle, AgentClass::Pedestrian];

    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Pedestrian => "pedestrian",
        }
    }
}

impl fmt::Display for AgentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AgentClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vehicle" => Ok(AgentClass::Vehicle),
            "pedestrian" => Ok(AgentClass::Pedestrian),
            other => Err(Error::InvalidValue(format!("unknown agent class {other:?}"))),
        }
    }
}

/// The four corner cells and weights of a bilinear sample.
///
/// On a lattice line the lower interval is used (`fx`, `fy` lie in `(0, 1]`),
/// which fixes the subgradient of the weights with respect to the point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub x0: i64,
    pub y0: i64,
    pub fx: f64,
    pub fy: f64,
}

impl Stencil {
    /// Corners in the order `(x0, y0)`, `(x0 + 1, y0)`, `(x0, y0 + 1)`, `(x0 + 1, y0 + 1)`.
    pub const OFFSETS: [(i64, i64); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

    pub fn new(point: Vec2) -> Result<Self> {
        if !(point.x.is_finite() && point.y.is_finite()) {
            return Err(Error::InvalidSampleCoordinate {
                x: point.x,
                y: point.y,
            });
        }
        // Saturate far-away points; everything there is out of bounds anyway.
        const FAR: f64 = 1.0e15;
        let px = point.x.clamp(-FAR, FAR);
        let py = point.y.clamp(-FAR, FAR);
        let x0 = px.ceil() - 1.0;
        let y0 = py.ceil() - 1.0;
        Ok(Self {
            x0: x0 as i64,
            y0: y0 as i64,
            fx: px - x0,
            fy: py - y0,
        })
    }

    pub fn corner(&self, k: usize) -> (i64, i64) {
        let (dx, dy) = Self::OFFSETS[k];
        (self.x0 + dx, self.y0 + dy)
    }

    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    /// Derivatives of [`Stencil::weights`] with respect to the sample point's x.
    pub fn weights_dx(&self) -> [f64; 4] {
        let fy = self.fy;
        [-(1.0 - fy), 1.0 - fy, -fy, fy]
    }

    /// Derivatives of [`Stencil::weights`] with respect to the sample point's y.
    pub fn weights_dy(&self) -> [f64; 4] {
        let fx = self.fx;
        [-(1.0 - fx), -fx, 1.0 - fx, fx]
    }

    /// Corner values, zero outside the grid.
    pub fn corner_values(&self, field: &Grid<f64>) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (k, v) in out.iter_mut().enumerate() {
            let (cx, cy) = self.corner(k);
            *v = field.get_signed(cx, cy).copied().unwrap_or(0.0);
        }
        out
    }
}

/// Bilinear interpolation at `point` (sample coordinates). Corners outside the
/// grid contribute zero.
pub fn bilinear_sample(field: &Grid<f64>, point: Vec2) -> Result<f64> {
    let stencil = Stencil::new(point)?;
    let w = stencil.weights();
    let v = stencil.corner_values(field);
    Ok(w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_02() -> GridSpec {
        GridSpec::default()
    }

    #[test]
    fn sample_at_cell_center_returns_cell_value() {
        let g = Grid::from_fn(4, 3, |x, y| (x + 10 * y) as f64);
        for y in 0..3 {
            for x in 0..4 {
                let v = bilinear_sample(&g, Vec2::new(x as f64, y as f64)).unwrap();
                assert_eq!(v, *g.get(x, y));
            }
        }
    }

    #[test]
    fn sample_midway_is_average() {
        let g = Grid::from_vec(2, 1, vec![0.2, 0.8]).unwrap();
        let v = bilinear_sample(&g, Vec2::new(0.5, 0.0)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_outside_is_vacuum() {
        let g = Grid::filled(3, 3, 1.0);
        assert_eq!(bilinear_sample(&g, Vec2::new(-1.0, 1.0)).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&g, Vec2::new(1.0, 3.0)).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&g, Vec2::new(1e300, -1e300)).unwrap(), 0.0);
        // Half a cell outside keeps half the mass.
        assert!((bilinear_sample(&g, Vec2::new(-0.5, 1.0)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let g = Grid::filled(3, 3, 1.0);
        assert!(matches!(
            bilinear_sample(&g, Vec2::new(f64::NAN, 0.0)),
            Err(Error::InvalidSampleCoordinate { .. })
        ));
        assert!(bilinear_sample(&g, Vec2::new(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn lattice_points_use_lower_interval() {
        let s = Stencil::new(Vec2::new(2.0, 3.0)).unwrap();
        assert_eq!((s.x0, s.y0), (1, 2));
        assert_eq!((s.fx, s.fy), (1.0, 1.0));
        let s = Stencil::new(Vec2::new(2.25, -0.5)).unwrap();
        assert_eq!((s.x0, s.y0), (2, -1));
        assert!((s.fx - 0.25).abs() < 1e-15 && (s.fy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn world_to_grid_examples() {
        let spec = spec_02();
        let o = Vec2::new(spec.origin[0], spec.origin[1]);
        assert_eq!(spec.world_to_grid(o), Vec2::new(0.0, 0.0));
        let one = spec.world_to_grid(o + Vec2::new(spec.cell_size, spec.cell_size));
        assert!((one - Vec2::new(1.0, 1.0)).norm() < 1e-12);
        let five = spec.world_to_grid(o + Vec2::new(1.0, 0.0));
        assert!((five - Vec2::new(5.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn cell_center_maps_to_integer_sample_coordinates() {
        let spec = spec_02();
        let c = spec.cell_center_world(17, 230);
        let s = spec.world_to_sample(c);
        assert!((s - Vec2::new(17.0, 230.0)).norm() < 1e-9);
    }

    #[test]
    fn spec_validation() {
        let mut spec = spec_02();
        assert!(spec.validate().is_ok());
        spec.aggregation_factor = 0;
        assert!(spec.validate().is_err());
        let mut spec = spec_02();
        spec.cell_size = 0.0;
        assert!(spec.validate().is_err());
        assert_eq!(spec_02().first_step(), -4);
        assert_eq!(spec_02().last_step(), 30);
    }

    #[test]
    fn occupancy_rejects_out_of_range() {
        assert!(OccupancyGrid::from_vec(2, 1, vec![0.0, 1.5]).is_err());
        assert!(OccupancyGrid::from_vec(2, 1, vec![f64::NAN, 0.5]).is_err());
        assert!(OccupancyGrid::from_vec(2, 1, vec![0.0, 1.0]).is_ok());
        assert!(FlowField::uniform(2, 2, Vec2::new(f64::INFINITY, 0.0)).is_err());
    }
}
