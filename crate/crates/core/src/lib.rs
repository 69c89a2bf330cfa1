//! Occupancy flow fields for motion forecasting.
//!
//! Agents are rasterized into bird's-eye-view occupancy grids with backward
//! flow fields; flows are chained by bilinear warping into flow traces that
//! both supervise predictions and recover agent identities.

pub mod baseline;
pub mod error;
pub mod format;
pub mod grid;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod scene;
pub mod store;
pub mod warp;

pub use error::{Error, Result};
