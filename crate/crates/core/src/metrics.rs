//! Occupancy, flow and flow-traced evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::grid::{AgentClass, FlowField, Grid, GridSpec, OccupancyGrid};
use crate::labels::{LabeledFrame, Labels};
use crate::losses::Prediction;
use crate::warp::{flow_trace, WarpedOccupancy};

pub const DEFAULT_THRESHOLDS: usize = 100;

/// Index of the largest threshold `i / (n - 1)` that is `<= p`, or `None`
/// when `p` is below every threshold.
fn threshold_index(p: f64, n: usize) -> Option<usize> {
    let denom = (n - 1) as f64;
    let tau = |i: usize| i as f64 / denom;
    if p.is_nan() || p < 0.0 {
        return None;
    }
    let mut i = ((p * denom).floor() as usize).min(n - 1);
    while i + 1 < n && tau(i + 1) <= p {
        i += 1;
    }
    loop {
        if tau(i) <= p {
            return Some(i);
        }
        if i == 0 {
            return None;
        }
        i -= 1;
    }
}

/// Area under the precision-recall curve swept over `n` evenly spaced
/// thresholds in `[0, 1]`, predicting positive where `pred >= threshold`.
///
/// Thresholds with no predicted positives yield no point. Points are sorted by
/// recall with duplicates merged to their best precision, a point at recall 0
/// takes the precision of the highest-threshold point, and the curve is
/// integrated with trapezoids. `None` when the label has no positives.
pub fn auc_with(pred: &Grid<f64>, label: &Grid<f64>, n: usize) -> Result<Option<f64>> {
    if n < 2 {
        return Err(Error::InvalidConfig("at least two thresholds are required".into()));
    }
    pred.ensure_same_shape(label)?;
    let mut pos = vec![0u64; n];
    let mut neg = vec![0u64; n];
    let mut total_pos = 0u64;
    for (&p, &q) in pred.data().iter().zip(label.data()) {
        let is_pos = q != 0.0;
        total_pos += u64::from(is_pos);
        if let Some(i) = threshold_index(p, n) {
            if is_pos {
                pos[i] += 1;
            } else {
                neg[i] += 1;
            }
        }
    }
    if total_pos == 0 {
        return Ok(None);
    }
    // Walk thresholds downward, accumulating predicted positives.
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(n + 1);
    for i in (0..n).rev() {
        tp += pos[i];
        fp += neg[i];
        if tp + fp > 0 {
            points.push((tp as f64 / total_pos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    Ok(Some(pr_area(points)))
}

/// Trapezoid area of PR points given in descending-threshold order.
fn pr_area(mut points: Vec<(f64, f64)>) -> f64 {
    let Some(&(_, top_precision)) = points.first() else {
        return 0.0;
    };
    points.push((0.0, top_precision));
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    points.dedup_by(|later, earlier| later.0 == earlier.0);
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

pub fn auc(pred: &OccupancyGrid, label: &OccupancyGrid) -> Result<Option<f64>> {
    auc_with(pred.grid(), label.grid(), DEFAULT_THRESHOLDS)
}

/// `sum(a * b) / sum(a + b - a * b)`, 0 when both grids are empty.
pub fn soft_iou_grid(pred: &Grid<f64>, label: &Grid<f64>) -> Result<f64> {
    pred.ensure_same_shape(label)?;
    let (mut inter, mut union) = (0.0, 0.0);
    for (&a, &b) in pred.data().iter().zip(label.data()) {
        inter += a * b;
        union += a + b - a * b;
    }
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

pub fn soft_iou(pred: &OccupancyGrid, label: &OccupancyGrid) -> Result<f64> {
    soft_iou_grid(pred.grid(), label.grid())
}

/// Mean end-point error over labeled-occupied cells, in cells.
pub fn epe(pred: &FlowField, label: &FlowField, label_occ: &OccupancyGrid) -> Result<Option<f64>> {
    pred.grid().ensure_same_shape(label.grid())?;
    pred.grid().ensure_same_shape(label_occ.grid())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for ((a, b), &o) in pred.vectors().iter().zip(label.vectors()).zip(label_occ.values()) {
        if o != 0.0 {
            sum += (a - b).norm();
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Share of labeled-owned cells whose traced ID matches the owner.
pub fn id_recall(trace: &WarpedOccupancy, label: &LabeledFrame) -> Result<Option<f64>> {
    trace.ids().ensure_same_shape(&label.ids)?;
    let (mut hit, mut count) = (0usize, 0usize);
    for (&traced, &owner) in trace.ids().data().iter().zip(label.ids.data()) {
        if owner != 0 {
            count += 1;
            hit += usize::from(traced == owner);
        }
    }
    Ok((count > 0).then(|| hit as f64 / count as f64))
}

/// Element-wise `trace * pred`.
pub fn traced_product(trace: &Grid<f64>, pred: &OccupancyGrid) -> Result<Grid<f64>> {
    trace.ensure_same_shape(pred.grid())?;
    let data = trace
        .data()
        .iter()
        .zip(pred.values())
        .map(|(w, o)| w * o)
        .collect();
    Grid::from_vec(trace.width(), trace.height(), data)
}

/// AUC and soft IoU of `trace * pred` against the label.
pub fn flow_traced_metrics_with(
    trace: &Grid<f64>,
    pred: &OccupancyGrid,
    label: &OccupancyGrid,
    thresholds: usize,
) -> Result<(Option<f64>, f64)> {
    let product = traced_product(trace, pred)?;
    Ok((
        auc_with(&product, label.grid(), thresholds)?,
        soft_iou_grid(&product, label.grid())?,
    ))
}

pub fn flow_traced_metrics(
    trace: &Grid<f64>,
    pred: &OccupancyGrid,
    label: &OccupancyGrid,
) -> Result<(Option<f64>, f64)> {
    flow_traced_metrics_with(trace, pred, label, DEFAULT_THRESHOLDS)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WaypointMetrics {
    pub auc: Option<f64>,
    pub soft_iou: Option<f64>,
    pub epe: Option<f64>,
    pub id_recall: Option<f64>,
    pub ft_auc: Option<f64>,
    pub ft_iou: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = ["auc", "soft_iou", "epe", "id_recall", "ft_auc", "ft_iou"];

impl WaypointMetrics {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.auc,
            self.soft_iou,
            self.epe,
            self.id_recall,
            self.ft_auc,
            self.ft_iou,
        ]
    }

    fn from_values(v: [Option<f64>; 6]) -> Self {
        Self {
            auc: v[0],
            soft_iou: v[1],
            epe: v[2],
            id_recall: v[3],
            ft_auc: v[4],
            ft_iou: v[5],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts(pub [usize; 6]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub thresholds: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub spec: GridSpec,
    /// Per class, waypoints `1 ..= T` at index `t - 1`.
    pub classes: BTreeMap<AgentClass, Vec<WaypointMetrics>>,
    /// Per class mean over waypoints where each metric is defined.
    pub mean: BTreeMap<AgentClass, WaypointMetrics>,
    pub skipped: BTreeMap<AgentClass, SkipCounts>,
    /// Cells where `trace * pred > pred`; always 0 for a correct warp.
    pub product_violations: usize,
}

fn opt_json(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

fn metrics_json(m: &WaypointMetrics) -> Value {
    let mut obj = Map::new();
    for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
        obj.insert((*name).into(), opt_json(v));
    }
    Value::Object(obj)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn waypoint(&self, class: AgentClass, t: usize) -> Option<&WaypointMetrics> {
        self.classes.get(&class)?.get(t.checked_sub(1)?)
    }

    pub fn to_json_value(&self) -> Value {
        let mut root = Map::new();
        for (class, rows) in &self.classes {
            let mut per_t = Map::new();
            for (i, m) in rows.iter().enumerate() {
                per_t.insert((i + 1).to_string(), metrics_json(m));
            }
            root.insert(class.name().into(), Value::Object(per_t));
        }
        let mut mean = Map::new();
        let mut skipped = Map::new();
        for (class, m) in &self.mean {
            mean.insert(class.name().into(), metrics_json(m));
            let counts = self.skipped.get(class).copied().unwrap_or_default();
            let mut obj = Map::new();
            for (name, c) in METRIC_NAMES.iter().zip(counts.0) {
                obj.insert((*name).into(), json!(c));
            }
            skipped.insert(class.name().into(), Value::Object(obj));
        }
        root.insert("mean".into(), Value::Object(mean));
        root.insert("skipped".into(), Value::Object(skipped));
        root.insert("product_violations".into(), json!(self.product_violations));
        Value::Object(root)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json_value()).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per class and waypoint; empty fields are undefined metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,t,auc,soft_iou,epe,id_recall,ft_auc,ft_iou\n");
        for (class, rows) in &self.classes {
            for (i, m) in rows.iter().enumerate() {
                let fields: Vec<String> = m.values().iter().map(|v| fmt_opt(*v)).collect();
                let _ = writeln!(out, "{},{},{}", class.name(), i + 1, fields.join(","));
            }
        }
        out
    }

    /// Fixed-width table: a time column then the six metrics for each class.
    pub fn to_table(&self) -> String {
        let classes: Vec<AgentClass> = self.classes.keys().copied().collect();
        let mut out = String::new();
        let _ = write!(out, "{:>8}", "time");
        for class in &classes {
            for name in METRIC_NAMES {
                let _ = write!(out, " {:>10}", format!("{}.{}", &class.name()[..3], name_short(name)));
            }
        }
        out.push('\n');
        let _ = write!(out, "{:>8}", "(sec)");
        out.push_str(&" ".repeat(11 * METRIC_NAMES.len() * classes.len()));
        out.push('\n');
        for t in 1..=self.spec.num_waypoints {
            let _ = write!(out, "{:>8.1}", t as f64 * self.spec.waypoint_seconds());
            for class in &classes {
                let m = self.waypoint(*class, t).copied().unwrap_or_default();
                for v in m.values() {
                    let cell = v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
                    let _ = write!(out, " {cell:>10}");
                }
            }
            out.push('\n');
        }
        out
    }
}

fn name_short(name: &str) -> &str {
    match name {
        "soft_iou" => "iou",
        "id_recall" => "idrec",
        other => other,
    }
}

fn waypoint_metrics(
    pred_occ: &OccupancyGrid,
    pred_flow: &FlowField,
    traced: &WarpedOccupancy,
    label: &LabeledFrame,
    thresholds: usize,
) -> Result<(WaypointMetrics, usize)> {
    let (ft_auc, ft_iou) =
        flow_traced_metrics_with(traced.values(), pred_occ, &label.occupancy, thresholds)?;
    let violations = traced
        .values()
        .data()
        .iter()
        .zip(pred_occ.values())
        .filter(|(w, o)| *w * *o > **o)
        .count();
    Ok((
        WaypointMetrics {
            auc: auc_with(pred_occ.grid(), label.occupancy.grid(), thresholds)?,
            soft_iou: Some(soft_iou(pred_occ, &label.occupancy)?),
            epe: epe(pred_flow, &label.flow, &label.occupancy)?,
            id_recall: id_recall(traced, label)?,
            ft_auc,
            ft_iou: Some(ft_iou),
        },
        violations,
    ))
}

/// Traces each class's predicted flows from the labeled current frame and
/// scores every waypoint.
pub fn evaluate(pred: &Prediction, labels: &Labels, options: &EvalOptions) -> Result<MetricReport> {
    pred.spec.ensure_compatible(&labels.spec)?;
    let mut classes = BTreeMap::new();
    let mut mean = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    let mut product_violations = 0;
    for (&class, set) in &labels.classes {
        let p = pred.class(class)?;
        if p.len() != set.waypoints.len() {
            return Err(Error::LengthMismatch {
                expected: set.waypoints.len(),
                found: p.len(),
            });
        }
        let trace = flow_trace(&set.current, p.flows())?;
        let scored: Vec<(WaypointMetrics, usize)> = (0..p.len())
            .into_par_iter()
            .map(|t| {
                waypoint_metrics(
                    &p.probability(t),
                    &p.flows()[t],
                    &trace[t],
                    &set.waypoints[t],
                    options.thresholds,
                )
            })
            .collect::<Result<_>>()?;
        let rows: Vec<WaypointMetrics> = scored.iter().map(|(m, _)| *m).collect();
        product_violations += scored.iter().map(|(_, v)| v).sum::<usize>();

        let mut means = [None; 6];
        let mut skips = [0usize; 6];
        for k in 0..6 {
            let present: Vec<f64> = rows.iter().filter_map(|m| m.values()[k]).collect();
            skips[k] = rows.len() - present.len();
            if !present.is_empty() {
                means[k] = Some(present.iter().sum::<f64>() / present.len() as f64);
            }
        }
        mean.insert(class, WaypointMetrics::from_values(means));
        skipped.insert(class, SkipCounts(skips));
        classes.insert(class, rows);
    }
    Ok(MetricReport {
        spec: labels.spec.clone(),
        classes,
        mean,
        skipped,
        product_violations,
    })
}
