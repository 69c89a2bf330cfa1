//! Binary grid files.
//!
//! `OFF1` holds floats: the magic, then little-endian `u32` height, width and
//! channel count, then `height * width * channels` little-endian `f32`
//! values, row-major and channel-minor. Occupancy uses one channel, flow two
//! (`dx` then `dy`). `OFI1` has the same header followed by `u32` agent IDs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FlowField, Grid, IdGrid, OccupancyGrid, Vec2};

pub const FLOAT_MAGIC: [u8; 4] = *b"OFF1";
pub const ID_MAGIC: [u8; 4] = *b"OFI1";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 4],
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Header {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.magic);
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < 4 {
            return Err(Error::Format {
                offset: bytes.len(),
                reason: "file ends before magic".into(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != FLOAT_MAGIC && magic != ID_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("unknown magic {:?}", String::from_utf8_lossy(&magic)),
            });
        }
        let mut fields = [0usize; 3];
        for (i, f) in fields.iter_mut().enumerate() {
            let at = 4 + 4 * i;
            let chunk = bytes.get(at..at + 4).ok_or_else(|| Error::Format {
                offset: bytes.len(),
                reason: "truncated header".into(),
            })?;
            let v = u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as usize;
            if v == 0 {
                return Err(Error::Format {
                    offset: at,
                    reason: "zero dimension in header".into(),
                });
            }
            *f = v;
        }
        Ok(Header {
            magic,
            height: fields[0],
            width: fields[1],
            channels: fields[2],
        })
    }

    fn payload<'a>(&self, bytes: &'a [u8]) -> Result<&'a [u8]> {
        let expected = self
            .height
            .checked_mul(self.width)
            .and_then(|n| n.checked_mul(self.channels))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: 4,
                reason: "header dimensions overflow".into(),
            })?;
        let found = bytes.len() - HEADER_LEN;
        if found != expected {
            return Err(Error::Format {
                offset: HEADER_LEN + found.min(expected),
                reason: format!("payload has {found} bytes, header implies {expected}"),
            });
        }
        Ok(&bytes[HEADER_LEN..])
    }
}

/// Raw float grid as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatGrid {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        Header {
            magic: FLOAT_MAGIC,
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
        .encode(&mut out);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<FloatGrid> {
        let header = Header::decode(bytes)?;
        if header.magic != FLOAT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "expected OFF1 float grid".into(),
            });
        }
        let payload = header.payload(bytes)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(FloatGrid {
            height: header.height,
            width: header.width,
            channels: header.channels,
            data,
        })
    }

    fn expect_channels(&self, channels: usize) -> Result<()> {
        if self.channels != channels {
            return Err(Error::Format {
                offset: 12,
                reason: format!("expected {channels} channel(s), found {}", self.channels),
            });
        }
        Ok(())
    }
}

pub fn encode_occupancy(grid: &OccupancyGrid) -> Vec<u8> {
    FloatGrid {
        height: grid.height(),
        width: grid.width(),
        channels: 1,
        data: grid.values().iter().map(|&v| v as f32).collect(),
    }
    .encode()
}

pub fn decode_occupancy(bytes: &[u8]) -> Result<OccupancyGrid> {
    let raw = FloatGrid::decode(bytes)?;
    raw.expect_channels(1)?;
    let values = raw.data.iter().map(|&v| v as f64).collect();
    OccupancyGrid::from_vec(raw.width, raw.height, values)
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    FloatGrid {
        height: flow.height(),
        width: flow.width(),
        channels: 2,
        data: flow
            .vectors()
            .iter()
            .flat_map(|v| [v.x as f32, v.y as f32])
            .collect(),
    }
    .encode()
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let raw = FloatGrid::decode(bytes)?;
    raw.expect_channels(2)?;
    let vectors = raw
        .data
        .chunks_exact(2)
        .map(|c| Vec2::new(c[0] as f64, c[1] as f64))
        .collect();
    FlowField::new(Grid::from_vec(raw.width, raw.height, vectors)?)
}

pub fn encode_ids(ids: &IdGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ids.len());
    Header {
        magic: ID_MAGIC,
        height: ids.height(),
        width: ids.width(),
        channels: 1,
    }
    .encode(&mut out);
    for v in ids.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_ids(bytes: &[u8]) -> Result<IdGrid> {
    let header = Header::decode(bytes)?;
    if header.magic != ID_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "expected OFI1 id raster".into(),
        });
    }
    if header.channels != 1 {
        return Err(Error::Format {
            offset: 12,
            reason: "id raster must have one channel".into(),
        });
    }
    let ids = header
        .payload(bytes)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Grid::from_vec(header.width, header.height, ids)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
