//! Binary PGM/PPM images of occupancy, flow and ID grids.
//!
//! Image row 0 is the grid's top row (largest `y`), so `+y` points up.

use occflow_core::grid::{FlowField, IdGrid, OccupancyGrid};

fn header(kind: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{kind}\n{width} {height}\n255\n").into_bytes()
}

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Grayscale image with pixel value `round(255 * p)`.
pub fn occupancy_pgm(occ: &OccupancyGrid) -> Vec<u8> {
    let (w, h) = (occ.width(), occ.height());
    let mut out = header("P5", w, h);
    for row in 0..h {
        let y = h - 1 - row;
        out.extend((0..w).map(|x| quantize(occ.get(x, y))));
    }
    out
}

/// HSV to RGB with all components in `[0, 1]` and hue in degrees.
pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Color-wheel encoding: hue from direction, saturation and value from
/// magnitude relative to `max_magnitude`.
pub fn flow_color(dx: f64, dy: f64, max_magnitude: f64) -> [f64; 3] {
    let mag = dx.hypot(dy);
    let level = if max_magnitude > 0.0 {
        (mag / max_magnitude).min(1.0)
    } else {
        0.0
    };
    hsv_to_rgb(dy.atan2(dx).to_degrees(), level, level)
}

/// Largest flow magnitude, used when no explicit scale is given.
pub fn max_flow_magnitude(flow: &FlowField) -> f64 {
    flow.vectors().iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn ppm(width: usize, height: usize, pixel: impl Fn(usize, usize) -> [f64; 3]) -> Vec<u8> {
    let mut out = header("P6", width, height);
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            out.extend(pixel(x, y).map(quantize));
        }
    }
    out
}

pub fn flow_ppm(flow: &FlowField, max_magnitude: f64) -> Vec<u8> {
    ppm(flow.width(), flow.height(), |x, y| {
        let v = flow.get(x, y);
        flow_color(v.x, v.y, max_magnitude)
    })
}

/// Flow colors scaled by occupancy.
pub fn combined_ppm(flow: &FlowField, occ: &OccupancyGrid, max_magnitude: f64) -> Vec<u8> {
    ppm(flow.width(), flow.height(), |x, y| {
        let v = flow.get(x, y);
        let p = occ.get(x, y);
        flow_color(v.x, v.y, max_magnitude).map(|c| c * p)
    })
}

/// Stable pseudo-random color per ID; `0` is black.
pub fn id_color(id: u32) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    // splitmix64 finalizer
    let mut z = u64::from(id).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    let b = z.to_le_bytes();
    [b[0] | 0x40, b[1] | 0x40, b[2] | 0x40]
}

pub fn ids_ppm(ids: &IdGrid) -> Vec<u8> {
    let (w, h) = (ids.width(), ids.height());
    let mut out = header("P6", w, h);
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            out.extend(id_color(*ids.get(x, y)));
        }
    }
    out
}
