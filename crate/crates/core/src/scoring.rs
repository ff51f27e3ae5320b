//! Range-based error-estimation scores per feature group.
//!
//! score = (activation range of the group) x (largest weight-slice range
//! over output channels). Low scores mark groups expected to lose little
//! when computed in 4 bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::graph::{MatmulLayer, NetworkGraph};
use crate::qtensor::ChannelRange;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorScore {
    /// Index among the selectable layers.
    pub layer: usize,
    pub layer_name: String,
    pub group: usize,
    pub activation_range: f64,
    pub max_weight_range: f64,
    pub score: f64,
}

/// Scores indexed `[selectable layer][group]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub per_layer: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn from_scores(scores: &[ErrorScore], group_counts: &[usize]) -> Result<Self> {
        let mut per_layer: Vec<Vec<Option<f64>>> = group_counts.iter().map(|&n| vec![None; n]).collect();
        for s in scores {
            let slot = per_layer
                .get_mut(s.layer)
                .and_then(|l| l.get_mut(s.group))
                .ok_or_else(|| Error::InvalidConfig(format!("score for unknown group {}:{}", s.layer, s.group)))?;
            *slot = Some(s.score);
        }
        let per_layer = per_layer
            .into_iter()
            .enumerate()
            .map(|(l, v)| {
                v.into_iter()
                    .enumerate()
                    .map(|(g, s)| s.ok_or_else(|| Error::MissingRange { layer: format!("selectable layer {l}"), group: g }))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(ScoreTable { per_layer })
    }

    pub fn get(&self, layer: usize, group: usize) -> f64 {
        self.per_layer[layer][group]
    }

    /// All (layer, group) pairs sorted by ascending score, ties by (layer, group).
    pub fn ascending(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self
            .per_layer
            .iter()
            .enumerate()
            .flat_map(|(l, gs)| (0..gs.len()).map(move |g| (l, g)))
            .collect();
        v.sort_by(|a, b| self.get(a.0, a.1).total_cmp(&self.get(b.0, b.1)).then(a.cmp(b)));
        v
    }
}

/// Range (max - min) of one layer's weight slice for a group in output channel `o`.
fn weight_slice_range(m: &MatmulLayer, span: std::ops::Range<usize>, o: usize) -> f64 {
    let f = m.features();
    let taps = m.taps();
    let row = &m.weight.data()[o * f * taps..(o + 1) * f * taps];
    let vals = &row[span.start * taps..span.end * taps];
    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    f64::from(hi) - f64::from(lo)
}

/// Per-group scores of one layer, in current group order.
pub fn layer_group_scores(m: &MatmulLayer, range: &ChannelRange) -> Vec<f64> {
    m.groups
        .iter()
        .map(|g| {
            let (lo, hi) = range.span(g.span());
            let w = (0..m.outputs()).map(|o| weight_slice_range(m, g.span(), o)).fold(0.0, f64::max);
            (f64::from(hi) - f64::from(lo)) * w
        })
        .collect()
}

/// Scores every group of every selectable layer from calibrated float
/// activation ranges (one per selectable layer) and the float weights.
/// The result is sorted ascending with ties broken by (layer, group).
pub fn score_groups(net: &NetworkGraph, ranges: &[ChannelRange]) -> Result<Vec<ErrorScore>> {
    let nodes = net.selectable_nodes();
    if ranges.len() != nodes.len() {
        return Err(Error::InvalidConfig(format!(
            "{} ranges for {} selectable layers",
            ranges.len(),
            nodes.len()
        )));
    }
    let mut out = Vec::new();
    for (l, (&n, range)) in nodes.iter().zip(ranges).enumerate() {
        let m = net.matmul(n).expect("selectable layers are matmuls");
        if range.channels() != m.features() {
            return Err(Error::MissingRange {
                layer: net.nodes[n].name.clone(),
                group: range.channels() / net.group_size,
            });
        }
        for (gi, g) in m.groups.iter().enumerate() {
            let (lo, hi) = range.span(g.span());
            let activation_range = f64::from(hi) - f64::from(lo);
            let max_weight_range = (0..m.outputs())
                .map(|o| weight_slice_range(m, g.span(), o))
                .fold(0.0, f64::max);
            out.push(ErrorScore {
                layer: l,
                layer_name: net.nodes[n].name.clone(),
                group: gi,
                activation_range,
                max_weight_range,
                score: activation_range * max_weight_range,
            });
        }
    }
    out.sort_by(|a, b| a.score.total_cmp(&b.score).then((a.layer, a.group).cmp(&(b.layer, b.group))));
    Ok(out)
}

/// Scores using the ranges stored by calibration.
pub fn score_network(net: &NetworkGraph) -> Result<Vec<ErrorScore>> {
    let ranges = net
        .selectable_nodes()
        .iter()
        .map(|&n| {
            net.matmul(n)
                .and_then(|m| m.quant.as_ref())
                .map(|q| q.act_range.clone())
                .ok_or(Error::NotPrepared("scoring (run calibrate first)"))
        })
        .collect::<Result<Vec<_>>>()?;
    score_groups(net, &ranges)
}

/// CSV with header `layer,group,activation_range,max_weight_range,score`.
pub fn scores_csv(scores: &[ErrorScore]) -> String {
    let mut s = String::from("layer,group,activation_range,max_weight_range,score\n");
    for e in scores {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.layer_name, e.group, e.activation_range, e.max_weight_range, e.score
        ));
    }
    s
}
