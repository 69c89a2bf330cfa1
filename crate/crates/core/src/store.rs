//! Directory layouts for labels, predictions and flow traces.
//!
//! Each directory holds a JSON manifest plus one binary grid per class,
//! waypoint and field, named `<class>/t<NN>_<field>.<ext>` where `t00` is the
//! current frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{
    decode_flow, decode_ids, decode_occupancy, encode_flow, encode_ids, encode_occupancy,
    write_atomic,
};
use crate::grid::{AgentClass, GridSpec, OccupancyGrid};
use crate::labels::{LabelMode, LabelSet, LabeledFrame, Labels};
use crate::losses::{ClassPrediction, Prediction};
use crate::warp::WarpedOccupancy;

pub const LABELS_MANIFEST: &str = "labels.json";
pub const PREDICTION_MANIFEST: &str = "prediction.json";
pub const TRACE_MANIFEST: &str = "trace.json";

pub fn grid_path(dir: &Path, class: AgentClass, t: usize, field: &str) -> PathBuf {
    let ext = if field.ends_with("ids") { "ofi" } else { "off" };
    dir.join(class.name()).join(format!("t{t:02}_{field}.{ext}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, bytes)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn write_manifest<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

fn check_shape(spec: &GridSpec, width: usize, height: usize, path: &Path) -> Result<()> {
    if spec.width != width || spec.height != height {
        return Err(Error::SpecMismatch(format!(
            "{} is {height}x{width}, manifest says {}x{}",
            path.display(),
            spec.height,
            spec.width
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelsManifest {
    spec: GridSpec,
    mode: LabelMode,
    classes: Vec<AgentClass>,
}

fn write_frame(dir: &Path, class: AgentClass, t: usize, frame: &LabeledFrame) -> Result<()> {
    write_file(&grid_path(dir, class, t, "occupancy"), &encode_occupancy(&frame.occupancy))?;
    write_file(&grid_path(dir, class, t, "flow"), &encode_flow(&frame.flow))?;
    write_file(&grid_path(dir, class, t, "ids"), &encode_ids(&frame.ids))
}

fn read_frame(dir: &Path, spec: &GridSpec, class: AgentClass, t: usize) -> Result<LabeledFrame> {
    let occ_path = grid_path(dir, class, t, "occupancy");
    let occupancy = decode_occupancy(&read_file(&occ_path)?)?;
    check_shape(spec, occupancy.width(), occupancy.height(), &occ_path)?;
    let flow = decode_flow(&read_file(&grid_path(dir, class, t, "flow"))?)?;
    let ids = decode_ids(&read_file(&grid_path(dir, class, t, "ids"))?)?;
    occupancy.grid().ensure_same_shape(flow.grid())?;
    occupancy.grid().ensure_same_shape(&ids)?;
    Ok(LabeledFrame {
        occupancy,
        flow,
        ids,
    })
}

pub fn write_labels(dir: &Path, labels: &Labels) -> Result<()> {
    for (&class, set) in &labels.classes {
        write_frame(dir, class, 0, &set.current)?;
        for (i, frame) in set.waypoints.iter().enumerate() {
            write_frame(dir, class, i + 1, frame)?;
        }
    }
    write_manifest(
        &dir.join(LABELS_MANIFEST),
        &LabelsManifest {
            spec: labels.spec.clone(),
            mode: labels.mode,
            classes: labels.classes.keys().copied().collect(),
        },
    )
}

pub fn read_labels(dir: &Path) -> Result<Labels> {
    let manifest: LabelsManifest = read_manifest(&dir.join(LABELS_MANIFEST))?;
    manifest.spec.validate()?;
    let mut classes = BTreeMap::new();
    for class in manifest.classes {
        let current = read_frame(dir, &manifest.spec, class, 0)?;
        let waypoints = (1..=manifest.spec.num_waypoints)
            .map(|t| read_frame(dir, &manifest.spec, class, t))
            .collect::<Result<_>>()?;
        classes.insert(
            class,
            LabelSet {
                class,
                mode: manifest.mode,
                current,
                waypoints,
            },
        );
    }
    Ok(Labels {
        spec: manifest.spec,
        mode: manifest.mode,
        classes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionManifest {
    spec: GridSpec,
    classes: Vec<AgentClass>,
}

/// Writes occupancy as probabilities alongside the flows.
pub fn write_prediction(dir: &Path, pred: &Prediction) -> Result<()> {
    for (&class, p) in &pred.classes {
        for t in 0..p.len() {
            write_file(
                &grid_path(dir, class, t + 1, "occupancy"),
                &encode_occupancy(&p.probability(t)),
            )?;
            write_file(&grid_path(dir, class, t + 1, "flow"), &encode_flow(&p.flows()[t]))?;
        }
    }
    write_manifest(
        &dir.join(PREDICTION_MANIFEST),
        &PredictionManifest {
            spec: pred.spec.clone(),
            classes: pred.classes.keys().copied().collect(),
        },
    )
}

pub fn read_prediction(dir: &Path) -> Result<Prediction> {
    let manifest: PredictionManifest = read_manifest(&dir.join(PREDICTION_MANIFEST))?;
    manifest.spec.validate()?;
    let mut classes = BTreeMap::new();
    for class in manifest.classes {
        let mut occupancy: Vec<OccupancyGrid> = Vec::new();
        let mut flows = Vec::new();
        for t in 1..=manifest.spec.num_waypoints {
            let path = grid_path(dir, class, t, "occupancy");
            let occ = decode_occupancy(&read_file(&path)?)?;
            check_shape(&manifest.spec, occ.width(), occ.height(), &path)?;
            occupancy.push(occ);
            flows.push(decode_flow(&read_file(&grid_path(dir, class, t, "flow"))?)?);
        }
        classes.insert(class, ClassPrediction::from_probabilities(&occupancy, flows)?);
    }
    Ok(Prediction {
        spec: manifest.spec,
        classes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceManifest {
    spec: GridSpec,
    classes: Vec<AgentClass>,
}

/// Writes `W_1 ..= W_T` values and propagated IDs per class.
pub fn write_traces(
    dir: &Path,
    spec: &GridSpec,
    traces: &BTreeMap<AgentClass, Vec<WarpedOccupancy>>,
) -> Result<()> {
    for (&class, trace) in traces {
        for (i, w) in trace.iter().enumerate() {
            write_file(&grid_path(dir, class, i + 1, "trace"), &encode_occupancy(&w.occupancy()))?;
            write_file(&grid_path(dir, class, i + 1, "trace_ids"), &encode_ids(w.ids()))?;
        }
    }
    write_manifest(
        &dir.join(TRACE_MANIFEST),
        &TraceManifest {
            spec: spec.clone(),
            classes: traces.keys().copied().collect(),
        },
    )
}

pub fn read_traces(dir: &Path) -> Result<(GridSpec, BTreeMap<AgentClass, Vec<WarpedOccupancy>>)> {
    let manifest: TraceManifest = read_manifest(&dir.join(TRACE_MANIFEST))?;
    let mut out = BTreeMap::new();
    for class in manifest.classes {
        let trace = (1..=manifest.spec.num_waypoints)
            .map(|t| {
                let values = decode_occupancy(&read_file(&grid_path(dir, class, t, "trace"))?)?;
                let ids = decode_ids(&read_file(&grid_path(dir, class, t, "trace_ids"))?)?;
                WarpedOccupancy::new(values, ids)
            })
            .collect::<Result<_>>()?;
        out.insert(class, trace);
    }
    Ok((manifest.spec, out))
}
