//! Occupancy, flow and flow-trace losses with analytic gradients.
//!
//! The per-loss functions return raw sums over waypoints and cells; only
//! [`total_loss`] applies the `1 / (h * w * T)` normalization and the
//! weights. Every logarithm sees probabilities clipped to
//! `[PROB_CLIP, 1 - PROB_CLIP]`, and clipped values are constants for the
//! gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgentClass, FlowField, Grid, GridSpec, OccupancyGrid, Stencil, Vec2};
use crate::labels::{LabelSet, Labels};
use crate::warp::{warp_once, WarpedOccupancy};

pub const PROB_CLIP: f64 = 1e-7;

/// Logits are stored within `+-LOGIT_LIMIT`.
pub const LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub occupancy: f64,
    pub flow: f64,
    pub trace: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            occupancy: 1000.0,
            flow: 1.0,
            trace: 1000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("occupancy", self.occupancy),
            ("flow", self.flow),
            ("trace", self.trace),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            occupancy: self.occupancy * k,
            flow: self.flow * k,
            trace: self.trace * k,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Treat the warped occupancy as a constant: the trace loss then sends no
    /// gradient into the flows.
    pub detach_trace: bool,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], limited to `+-LOGIT_LIMIT`.
pub fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        return -LOGIT_LIMIT;
    }
    if p >= 1.0 {
        return LOGIT_LIMIT;
    }
    (p / (1.0 - p)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

fn is_clipped(p: f64) -> bool {
    !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p)
}

/// Binary cross-entropy `-(q ln p + (1 - q) ln(1 - p))` with `p` clipped.
pub fn cross_entropy(p: f64, q: f64) -> f64 {
    let p = clip(p);
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

/// `dH/dp` at an unclipped `p`, zero where clipping is active.
fn cross_entropy_slope(p: f64, q: f64) -> f64 {
    if is_clipped(p) {
        0.0
    } else {
        (p - q) / (p * (1.0 - p))
    }
}

/// One class's predicted occupancy logits and backward flows per waypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    logits: Vec<Grid<f64>>,
    flows: Vec<FlowField>,
}

impl ClassPrediction {
    pub fn new(logits: Vec<Grid<f64>>, flows: Vec<FlowField>) -> Result<Self> {
        if logits.len() != flows.len() {
            return Err(Error::LengthMismatch {
                expected: logits.len(),
                found: flows.len(),
            });
        }
        for (l, f) in logits.iter().zip(&flows) {
            l.ensure_same_shape(f.grid())?;
            if let Some(first) = logits.first() {
                first.ensure_same_shape(l)?;
            }
            if l.data().iter().any(|z| !z.is_finite()) {
                return Err(Error::InvalidValue("occupancy logit is not finite".into()));
            }
        }
        Ok(Self { logits, flows })
    }

    pub fn from_probabilities(occupancy: &[OccupancyGrid], flows: Vec<FlowField>) -> Result<Self> {
        let logits = occupancy.iter().map(|o| o.grid().map(|&p| logit(p))).collect();
        Self::new(logits, flows)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[Grid<f64>] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [Grid<f64>] {
        &mut self.logits
    }

    pub fn flows(&self) -> &[FlowField] {
        &self.flows
    }

    /// Replaces one flow vector; used by gradient checks and external optimizers.
    pub fn set_flow(&mut self, t: usize, x: usize, y: usize, v: Vec2) -> Result<()> {
        if !(v.x.is_finite() && v.y.is_finite()) {
            return Err(Error::InvalidValue("flow vector is not finite".into()));
        }
        let mut grid = self.flows[t].grid().clone();
        grid.set(x, y, v);
        self.flows[t] = FlowField::new(grid)?;
        Ok(())
    }

    pub fn probability(&self, t: usize) -> OccupancyGrid {
        OccupancyGrid::clamped(self.logits[t].map(|&z| sigmoid(z)))
    }

    pub fn probabilities(&self) -> Vec<OccupancyGrid> {
        (0..self.len()).map(|t| self.probability(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub spec: GridSpec,
    pub classes: BTreeMap<AgentClass, ClassPrediction>,
}

impl Prediction {
    pub fn class(&self, class: AgentClass) -> Result<&ClassPrediction> {
        self.classes
            .get(&class)
            .ok_or_else(|| Error::SpecMismatch(format!("prediction has no {class} output")))
    }
}

fn checked_pair<'a>(
    pred: &'a Prediction,
    labels: &'a Labels,
    class: AgentClass,
) -> Result<(&'a ClassPrediction, &'a LabelSet)> {
    pred.spec.ensure_compatible(&labels.spec)?;
    let p = pred.class(class)?;
    let l = labels
        .class(class)
        .ok_or_else(|| Error::SpecMismatch(format!("labels have no {class} output")))?;
    if p.len() != l.waypoints.len() {
        return Err(Error::LengthMismatch {
            expected: l.waypoints.len(),
            found: p.len(),
        });
    }
    for (z, frame) in p.logits.iter().zip(&l.waypoints) {
        z.ensure_same_shape(frame.occupancy.grid())?;
    }
    Ok((p, l))
}

/// Raw cross-entropy sum over waypoints and cells.
pub fn occupancy_loss(pred: &Prediction, labels: &Labels, class: AgentClass) -> Result<f64> {
    let (p, l) = checked_pair(pred, labels, class)?;
    Ok(p.logits
        .iter()
        .zip(&l.waypoints)
        .map(|(z, frame)| {
            z.data()
                .iter()
                .zip(frame.occupancy.values())
                .map(|(&z, &q)| cross_entropy(sigmoid(z), q))
                .sum::<f64>()
        })
        .sum())
}

/// Raw L1 flow error weighted by ground-truth occupancy.
pub fn flow_loss(pred: &Prediction, labels: &Labels, class: AgentClass) -> Result<f64> {
    let (p, l) = checked_pair(pred, labels, class)?;
    Ok(p.flows
        .iter()
        .zip(&l.waypoints)
        .map(|(f, frame)| {
            f.vectors()
                .iter()
                .zip(frame.flow.vectors())
                .zip(frame.occupancy.values())
                .map(|((a, b), &q)| ((a.x - b.x).abs() + (a.y - b.y).abs()) * q)
                .sum::<f64>()
        })
        .sum())
}

/// `W_0 ..= W_T` from the label's current frame and the predicted flows.
fn warped_chain(p: &ClassPrediction, l: &LabelSet) -> Result<Vec<WarpedOccupancy>> {
    let mut chain = Vec::with_capacity(p.len() + 1);
    chain.push(WarpedOccupancy::from_frame(&l.current)?);
    for flow in &p.flows {
        let next = warp_once(flow, chain.last().expect("non-empty"))?;
        chain.push(next);
    }
    Ok(chain)
}

/// Raw cross-entropy of `W_t * O_t` against the labels, `W` traced from the
/// current ground-truth frame through the predicted flows.
pub fn trace_loss(pred: &Prediction, labels: &Labels, class: AgentClass) -> Result<f64> {
    let (p, l) = checked_pair(pred, labels, class)?;
    let chain = warped_chain(p, l)?;
    Ok(chain[1..]
        .iter()
        .zip(&p.logits)
        .zip(&l.waypoints)
        .map(|((w, z), frame)| {
            w.values()
                .data()
                .iter()
                .zip(z.data())
                .zip(frame.occupancy.values())
                .map(|((&wv, &z), &q)| cross_entropy(wv * sigmoid(z), q))
                .sum::<f64>()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassLoss {
    pub l_occupancy: f64,
    pub l_flow: f64,
    pub l_trace: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_occupancy: f64,
    pub l_flow: f64,
    pub l_trace: f64,
    pub total: f64,
    pub per_class: BTreeMap<AgentClass, ClassLoss>,
}

impl LossReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("loss report serializes")
    }
}

fn normalizer(labels: &Labels) -> f64 {
    1.0 / (labels.spec.cells() * labels.spec.num_waypoints) as f64
}

/// Combined objective summed over the label classes.
pub fn total_loss(pred: &Prediction, labels: &Labels, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let norm = normalizer(labels);
    let mut report = LossReport {
        l_occupancy: 0.0,
        l_flow: 0.0,
        l_trace: 0.0,
        total: 0.0,
        per_class: BTreeMap::new(),
    };
    for &class in labels.classes.keys() {
        let lo = occupancy_loss(pred, labels, class)?;
        let lf = flow_loss(pred, labels, class)?;
        let lw = trace_loss(pred, labels, class)?;
        let total = norm * (weights.occupancy * lo + weights.flow * lf + weights.trace * lw);
        report.l_occupancy += lo;
        report.l_flow += lf;
        report.l_trace += lw;
        report.total += total;
        report.per_class.insert(
            class,
            ClassLoss {
                l_occupancy: lo,
                l_flow: lf,
                l_trace: lw,
                total,
            },
        );
    }
    Ok(report)
}

/// Gradients of the total loss for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGradients {
    pub occupancy_logits: Vec<Grid<f64>>,
    pub flows: Vec<Grid<Vec2>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub classes: BTreeMap<AgentClass, ClassGradients>,
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Analytic gradients of [`total_loss`] with respect to every occupancy logit
/// and flow component.
///
/// The trace term is differentiated through the whole warp chain: the
/// adjoint of one warp hands each destination's gradient to its four source
/// corners and, through the bilinear weights, to the flow at the destination.
/// On lattice lines the lower interval's derivative is used.
pub fn loss_gradients(
    pred: &Prediction,
    labels: &Labels,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<Gradients> {
    weights.validate()?;
    let norm = normalizer(labels);
    let mut classes = BTreeMap::new();
    for &class in labels.classes.keys() {
        let (p, l) = checked_pair(pred, labels, class)?;
        classes.insert(class, class_gradients(p, l, weights, options, norm)?);
    }
    Ok(Gradients { classes })
}

fn class_gradients(
    p: &ClassPrediction,
    l: &LabelSet,
    weights: &LossWeights,
    options: &LossOptions,
    norm: f64,
) -> Result<ClassGradients> {
    let steps = p.len();
    let chain = warped_chain(p, l)?;
    let (w, h) = (l.current.occupancy.width(), l.current.occupancy.height());
    let mut g_logits = Vec::with_capacity(steps);
    let mut g_flows = vec![Grid::filled(w, h, Vec2::zeros()); steps];
    // Adjoint of each W_t, t = 1..=T (index t - 1).
    let mut g_warp = vec![Grid::filled(w, h, 0.0); steps];

    for t in 0..steps {
        let labels = &l.waypoints[t];
        let warped = chain[t + 1].values();
        let mut g = Grid::filled(w, h, 0.0);
        for (i, gi) in g.data_mut().iter_mut().enumerate() {
            let z = p.logits[t].data()[i];
            let prob = sigmoid(z);
            let q = labels.occupancy.values()[i];
            let dprob = prob * (1.0 - prob);
            let occ = if is_clipped(prob) { 0.0 } else { prob - q };
            let wv = warped.data()[i];
            let slope = cross_entropy_slope(wv * prob, q);
            *gi = norm * (weights.occupancy * occ + weights.trace * slope * wv * dprob);
            g_warp[t].data_mut()[i] = norm * weights.trace * slope * prob;
        }
        g_logits.push(g);

        let gf = g_flows[t].data_mut();
        for (i, gi) in gf.iter_mut().enumerate() {
            let d = p.flows[t].vectors()[i] - labels.flow.vectors()[i];
            let q = labels.occupancy.values()[i];
            *gi = Vec2::new(signum0(d.x), signum0(d.y)) * (norm * weights.flow * q);
        }
    }

    if !options.detach_trace {
        for t in (0..steps).rev() {
            let prev = chain[t].values();
            let flow = &p.flows[t];
            let adjoint = std::mem::replace(&mut g_warp[t], Grid::filled(0, 0, 0.0));
            let mut upstream = (t > 0).then(|| Grid::filled(w, h, 0.0));
            for y in 0..h {
                for x in 0..w {
                    let a = *adjoint.get(x, y);
                    if a == 0.0 {
                        continue;
                    }
                    let stencil = Stencil::new(Vec2::new(x as f64, y as f64) + flow.get(x, y))?;
                    let wts = stencil.weights();
                    let (dx, dy) = (stencil.weights_dx(), stencil.weights_dy());
                    let mut grad = Vec2::zeros();
                    for k in 0..4 {
                        let (cx, cy) = stencil.corner(k);
                        let Some(&v) = prev.get_signed(cx, cy) else {
                            continue;
                        };
                        grad += Vec2::new(dx[k], dy[k]) * v;
                        if let Some(up) = upstream.as_mut() {
                            let (cx, cy) = (cx as usize, cy as usize);
                            let cur = *up.get(cx, cy);
                            up.set(cx, cy, cur + a * wts[k]);
                        }
                    }
                    let cur = *g_flows[t].get(x, y);
                    g_flows[t].set(x, y, cur + grad * a);
                }
            }
            if let Some(up) = upstream {
                for (dst, src) in g_warp[t - 1].data_mut().iter_mut().zip(up.data()) {
                    *dst += src;
                }
            }
        }
    }

    Ok(ClassGradients {
        occupancy_logits: g_logits,
        flows: g_flows,
    })
}
