//! Backward-flow warping of occupancy with agent-ID propagation.
//!
//! Each destination cell pulls from `cell + flow(cell)` in the previous grid,
//! so cells never contend and the warp parallelizes over rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FlowField, Grid, IdGrid, OccupancyGrid, Stencil, Vec2};
use crate::labels::LabeledFrame;
use crate::scene::AgentId;

/// Warped mass below this floor carries no agent ID.
pub const ID_MASS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WarpedOccupancy {
    values: Grid<f64>,
    ids: IdGrid,
}

impl WarpedOccupancy {
    pub fn new(values: OccupancyGrid, ids: IdGrid) -> Result<Self> {
        values.grid().ensure_same_shape(&ids)?;
        Ok(Self {
            values: values.into_grid(),
            ids,
        })
    }

    /// Starting point of a trace: the current occupancy with its owners.
    pub fn from_frame(frame: &LabeledFrame) -> Result<Self> {
        Self::new(frame.occupancy.clone(), frame.ids.clone())
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn ids(&self) -> &IdGrid {
        &self.ids
    }

    pub fn occupancy(&self) -> OccupancyGrid {
        OccupancyGrid::clamped(self.values.clone())
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        *self.values.get(x, y)
    }

    pub fn id(&self, x: usize, y: usize) -> AgentId {
        *self.ids.get(x, y)
    }

    pub fn total_mass(&self) -> f64 {
        self.values.data().iter().sum()
    }
}

/// Warped value and ID of one destination cell.
///
/// The ID is taken from the corner with the largest `weight * value`
/// contribution (first corner wins ties), and cleared below [`ID_MASS_FLOOR`].
pub fn warp_cell(flow: &FlowField, prev: &WarpedOccupancy, x: usize, y: usize) -> (f64, AgentId) {
    let point = Vec2::new(x as f64, y as f64) + flow.get(x, y);
    let stencil = Stencil::new(point).expect("flow fields are finite");
    let weights = stencil.weights();
    let mut value = 0.0;
    let mut best = (0.0, 0);
    for (k, w) in weights.iter().enumerate() {
        let (cx, cy) = stencil.corner(k);
        let Some(&v) = prev.values.get_signed(cx, cy) else {
            continue;
        };
        let contribution = w * v;
        value += contribution;
        if contribution > best.0 {
            best = (contribution, *prev.ids.get_signed(cx, cy).expect("same shape"));
        }
    }
    let value = value.clamp(0.0, 1.0);
    let id = if value < ID_MASS_FLOOR { 0 } else { best.1 };
    (value, id)
}

/// One warp step: `W_t = F_t o W_{t-1}`.
pub fn warp_once(flow: &FlowField, prev: &WarpedOccupancy) -> Result<WarpedOccupancy> {
    flow.grid().ensure_same_shape(&prev.values)?;
    let (w, h) = (prev.width(), prev.height());
    let mut values = vec![0.0; w * h];
    let mut ids = vec![0; w * h];
    values
        .par_chunks_mut(w)
        .zip(ids.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (vrow, irow))| {
            for x in 0..w {
                let (v, id) = warp_cell(flow, prev, x, y);
                vrow[x] = v;
                irow[x] = id;
            }
        });
    Ok(WarpedOccupancy {
        values: Grid::from_vec(w, h, values)?,
        ids: Grid::from_vec(w, h, ids)?,
    })
}

/// Warps the current frame through `flows` in order, returning `W_1 ..= W_T`.
pub fn flow_trace(current: &LabeledFrame, flows: &[FlowField]) -> Result<Vec<WarpedOccupancy>> {
    if flows.is_empty() {
        return Err(Error::LengthMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mut prev = WarpedOccupancy::from_frame(current)?;
    let mut trace = Vec::with_capacity(flows.len());
    for flow in flows {
        let next = warp_once(flow, &prev)?;
        trace.push(next.clone());
        prev = next;
    }
    Ok(trace)
}

/// Agent that could occupy `cell` at waypoint `t` (1-based) according to the trace.
pub fn recover_ids(trace: &[WarpedOccupancy], t: usize, cell: (usize, usize)) -> AgentId {
    t.checked_sub(1)
        .and_then(|i| trace.get(i))
        .map(|w| w.id(cell.0, cell.1))
        .unwrap_or(0)
}
