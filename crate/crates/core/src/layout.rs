//! Channel layout: reorders feature groups so that at every prepared ratio
//! the 4-bit groups of each layer form a prefix `[0, max_4bit_ch)`.
//!
//! A layer's input order is realised by permuting the producing layer's
//! output rows. Values read by consumers that want different orders (a
//! residual skip, or a second consumer) get a runtime Reorder node.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evoselect::includes;
use crate::kernels::{ActScales, FeatureGroup};
use crate::netsim::graph::{same_ratio, MatmulLayer, NetworkGraph, Node, Op, RatioBoundary, Selection};
use crate::qtensor::FloatTensor;

/// Group-level reordering of one layer's input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPermutation {
    pub layer: String,
    /// New group position `j` holds original group `group_order[j]`.
    pub group_order: Vec<usize>,
    /// New channel position `k` holds original channel `perm[k]`.
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl ChannelPermutation {
    pub fn from_group_order(layer: &str, groups: &[FeatureGroup], group_order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; groups.len()];
        if group_order.len() != groups.len()
            || group_order.iter().any(|&g| g >= groups.len() || std::mem::replace(&mut seen[g], true))
        {
            return Err(Error::InvalidConfig(format!("group order for {layer} is not a permutation")));
        }
        let perm: Vec<usize> = group_order.iter().flat_map(|&g| groups[g].span()).collect();
        Ok(ChannelPermutation {
            layer: layer.to_string(),
            inverse: invert(&perm),
            group_order,
            perm,
        })
    }

    pub fn is_identity(&self) -> bool {
        is_identity(&self.perm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlan {
    /// One permutation per selectable layer.
    pub perms: Vec<ChannelPermutation>,
    /// Per matmul layer `max_4bit_ch`, ascending by ratio.
    pub boundaries: Vec<RatioBoundary>,
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &c) in perm.iter().enumerate() {
        inv[c] = k;
    }
    inv
}

fn is_identity(order: &[usize]) -> bool {
    order.iter().enumerate().all(|(k, &c)| k == c)
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Sorts selections by ratio and checks shapes and nesting.
pub fn check_inclusive(net: &NetworkGraph, selections: &[Selection]) -> Result<Vec<Selection>> {
    let counts = net.selectable_group_counts();
    let mut sorted = selections.to_vec();
    sorted.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    for s in &sorted {
        if s.flags.len() != counts.len() || s.flags.iter().zip(&counts).any(|(f, &n)| f.len() != n) {
            return Err(Error::InvalidConfig(format!(
                "selection at ratio {} does not match the layer group counts",
                s.ratio
            )));
        }
    }
    for w in sorted.windows(2) {
        if same_ratio(w[0].ratio, w[1].ratio) {
            return Err(Error::InvalidConfig(format!("ratio {} selected twice", w[0].ratio)));
        }
        if !includes(&w[1].flags, &w[0].flags) {
            return Err(Error::NonInclusive {
                lower: w[0].ratio,
                higher: w[1].ratio,
            });
        }
    }
    Ok(sorted)
}

/// Orders each selectable layer's groups by the first ratio at which they
/// become 4-bit (stable by group index), never-selected groups last.
pub fn plan_layout(net: &NetworkGraph, selections: &[Selection]) -> Result<LayoutPlan> {
    if net.is_laid_out() || net.count_reorders() > 0 {
        return Err(Error::InvalidConfig("network already has a layout".into()));
    }
    let sorted = check_inclusive(net, selections)?;
    let selectable = net.selectable_nodes();
    let mut perms = Vec::with_capacity(selectable.len());
    let mut first_ratio: Vec<Vec<usize>> = Vec::with_capacity(selectable.len());
    for (l, &n) in selectable.iter().enumerate() {
        let m = net.matmul(n).expect("selectable layers are matmuls");
        let first: Vec<usize> = (0..m.groups.len())
            .map(|g| sorted.iter().position(|s| s.flags[l][g]).unwrap_or(usize::MAX))
            .collect();
        let mut order: Vec<usize> = (0..m.groups.len()).collect();
        order.sort_by_key(|&g| (first[g], g));
        perms.push(ChannelPermutation::from_group_order(&net.nodes[n].name, &m.groups, order)?);
        first_ratio.push(first);
    }
    let boundaries = sorted
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let max_4bit_ch = net
                .matmul_nodes()
                .iter()
                .map(|n| match selectable.iter().position(|x| x == n) {
                    Some(l) => {
                        let m = net.matmul(*n).expect("matmul");
                        m.groups
                            .iter()
                            .enumerate()
                            .filter(|(g, _)| first_ratio[l][*g] <= k)
                            .map(|(_, g)| g.len)
                            .sum()
                    }
                    None => 0,
                })
                .collect();
            RatioBoundary { ratio: s.ratio, max_4bit_ch }
        })
        .collect();
    Ok(LayoutPlan { perms, boundaries })
}

/// Gather turning a value held in order `from` into order `to`.
fn gather_between(from: &[usize], to: &[usize]) -> Vec<usize> {
    let pos = invert(from);
    to.iter().map(|&c| pos[c]).collect()
}

/// Splits a channel order into a group order over `groups`, if aligned.
fn group_order_of(order: &[usize], groups: &[FeatureGroup]) -> Option<Vec<usize>> {
    let by_start: BTreeMap<usize, usize> = groups.iter().enumerate().map(|(i, g)| (g.start, i)).collect();
    let mut out = Vec::with_capacity(groups.len());
    let mut k = 0;
    while k < order.len() {
        let gi = *by_start.get(&order[k])?;
        let g = groups[gi];
        if order.get(k..k + g.len)? != g.span().collect::<Vec<_>>().as_slice() {
            return None;
        }
        out.push(gi);
        k += g.len;
    }
    Some(out)
}

/// Rebuilds a layer with input channels in `in_order` (group aligned) and
/// output channels in `out_order`.
fn permute_layer(m: &MatmulLayer, in_order: &[usize], out_order: &[usize], name: &str) -> Result<MatmulLayer> {
    let group_order = group_order_of(in_order, &m.groups)
        .ok_or_else(|| Error::InvalidGraph(format!("input order of {name} splits a feature group")))?;
    let mut start = 0;
    let groups: Vec<FeatureGroup> = group_order
        .iter()
        .map(|&gi| {
            let g = FeatureGroup {
                start,
                len: m.groups[gi].len,
                origin: m.groups[gi].origin,
            };
            start += g.len;
            g
        })
        .collect();

    let (f, taps) = (m.features(), m.taps());
    let permute_rows = |src: &[f32]| -> Vec<f32> {
        let mut out = Vec::with_capacity(src.len());
        for &o in out_order {
            for &c in in_order {
                let base = (o * f + c) * taps;
                out.extend_from_slice(&src[base..base + taps]);
            }
        }
        out
    };
    let weight = FloatTensor::from_parts(m.weight.shape().to_vec(), permute_rows(m.weight.data()), m.weight.axes());
    let bias = out_order.iter().map(|&o| m.bias[o]).collect();
    let mut out = MatmulLayer::with_groups(m.kind, weight, bias, groups);

    if let Some(q) = &m.quant {
        let mut codes = Vec::with_capacity(q.weight_codes.len());
        for &o in out_order {
            for &c in in_order {
                let base = (o * f + c) * taps;
                codes.extend_from_slice(&q.weight_codes[base..base + taps]);
            }
        }
        let mut nq = q.clone();
        nq.act_range = q.act_range.permuted(in_order);
        nq.act_scales = match &q.act_scales {
            ActScales::PerTensor(s) => ActScales::PerTensor(*s),
            ActScales::PerGroup(v) => ActScales::PerGroup(group_order.iter().map(|&g| v[g]).collect()),
        };
        nq.weight_codes = codes;
        nq.weight_scales = out_order.iter().map(|&o| q.weight_scales[o]).collect();
        nq.shifts.act = group_order.iter().map(|&g| q.shifts.act[g]).collect();
        nq.shifts.weight = group_order
            .iter()
            .map(|&g| out_order.iter().map(|&o| q.shifts.weight[g][o]).collect())
            .collect();
        out.quant = Some(nq);
        out.refresh_nibbles();
    }
    Ok(out)
}

/// Applies a layout plan. The result computes exactly what the original
/// network computes, at every ratio, with each layer's 4-bit groups first.
pub fn apply_layout(net: &NetworkGraph, plan: &LayoutPlan) -> Result<NetworkGraph> {
    if net.is_laid_out() || net.count_reorders() > 0 {
        return Err(Error::InvalidConfig("network already has a layout".into()));
    }
    let shapes = net.value_shapes()?;
    let selectable = net.selectable_nodes();
    if plan.perms.len() != selectable.len() {
        return Err(Error::InvalidConfig(format!(
            "plan has {} permutations for {} selectable layers",
            plan.perms.len(),
            selectable.len()
        )));
    }
    let mm = net.matmul_nodes();
    if plan.boundaries.iter().any(|b| b.max_4bit_ch.len() != mm.len()) {
        return Err(Error::InvalidConfig("boundary markers do not cover every matmul layer".into()));
    }
    let mut wanted: BTreeMap<usize, &ChannelPermutation> = BTreeMap::new();
    for (&n, p) in selectable.iter().zip(&plan.perms) {
        let m = net.matmul(n).expect("matmul");
        if p.perm.len() != m.features() || p.group_order.len() != m.groups.len() {
            return Err(Error::ShapeMismatch {
                shape: m.weight.shape().to_vec(),
                expected: m.features(),
                actual: p.perm.len(),
            });
        }
        wanted.insert(n, p);
    }

    // Requested order of every value; the earliest consumer wins.
    let n_nodes = net.nodes.len();
    let mut request: Vec<Option<Vec<usize>>> = vec![None; n_nodes + 1];
    for i in (0..n_nodes).rev() {
        let node = &net.nodes[i];
        match &node.op {
            Op::Matmul(_) => {
                if let Some(p) = wanted.get(&i) {
                    request[node.input] = Some(p.perm.clone());
                }
            }
            Op::Relu | Op::Gelu | Op::GlobalAvgPool | Op::Reorder { .. } => {
                if let Some(r) = request[i + 1].clone() {
                    request[node.input] = Some(r);
                }
            }
            Op::Add { skip } => {
                if let Some(r) = request[i + 1].clone() {
                    request[*skip] = Some(r.clone());
                    request[node.input] = Some(r);
                }
            }
        }
    }

    let channels = |v: usize| shapes[v][0];
    let mut actual: Vec<Vec<usize>> = Vec::with_capacity(n_nodes + 1);
    actual.push(request[0].clone().unwrap_or_else(|| identity(channels(0))));
    let mut nodes: Vec<Node> = Vec::with_capacity(n_nodes + 2);
    let mut value_map = vec![0usize; n_nodes + 1];

    let reorder = |nodes: &mut Vec<Node>, name: String, src: usize, from: &[usize], to: &[usize]| -> usize {
        nodes.push(Node {
            name,
            input: src,
            op: Op::Reorder { gather: gather_between(from, to) },
        });
        nodes.len()
    };

    for (i, node) in net.nodes.iter().enumerate() {
        let v = node.input;
        let mut src = value_map[v];
        let (op, order) = match &node.op {
            Op::Matmul(m) => {
                let desired = match wanted.get(&i) {
                    Some(p) => p.perm.clone(),
                    None => actual[v].clone(),
                };
                if actual[v] != desired {
                    src = reorder(&mut nodes, format!("{}.reorder_in", node.name), src, &actual[v], &desired);
                }
                let out_order = request[i + 1].clone().unwrap_or_else(|| identity(m.outputs()));
                let layer = permute_layer(m, &desired, &out_order, &node.name)?;
                (Op::Matmul(layer), out_order)
            }
            Op::Relu | Op::Gelu | Op::GlobalAvgPool => (node.op.clone(), actual[v].clone()),
            Op::Add { skip } => {
                let mut skip_src = value_map[*skip];
                if actual[*skip] != actual[v] {
                    skip_src = reorder(
                        &mut nodes,
                        format!("{}.reorder_skip", node.name),
                        skip_src,
                        &actual[*skip],
                        &actual[v],
                    );
                }
                (Op::Add { skip: skip_src }, actual[v].clone())
            }
            Op::Reorder { .. } => unreachable!("rejected above"),
        };
        nodes.push(Node {
            name: node.name.clone(),
            input: src,
            op,
        });
        value_map[i + 1] = nodes.len();
        actual.push(order);
    }
    let last = &actual[n_nodes];
    if !is_identity(last) {
        let src = nodes.len();
        reorder(&mut nodes, "reorder_output".into(), src, last, &identity(last.len()));
    }

    let mut out = net.clone();
    out.nodes = nodes;
    out.input_order = Some(actual[0].clone()).filter(|o| !is_identity(o));
    out.selections = net
        .selections
        .iter()
        .map(|s| Selection {
            ratio: s.ratio,
            flags: s
                .flags
                .iter()
                .zip(&plan.perms)
                .map(|(f, p)| p.group_order.iter().map(|&g| f[g]).collect())
                .collect(),
        })
        .collect();
    out.boundaries = plan.boundaries.clone();
    out.validate()?;
    Ok(out)
}

/// Switches the active ratio by picking the stored boundary markers. No
/// weight data moves. Ratio 0 is always available.
pub fn set_ratio(net: &mut NetworkGraph, ratio: f64) -> Result<Vec<usize>> {
    let markers = if ratio == 0.0 && !net.boundaries.iter().any(|b| same_ratio(b.ratio, 0.0)) {
        vec![0; net.matmul_nodes().len()]
    } else {
        net.boundaries
            .iter()
            .find(|b| same_ratio(b.ratio, ratio))
            .map(|b| b.max_4bit_ch.clone())
            .ok_or_else(|| Error::UnpreparedRatio {
                requested: ratio,
                available: net.prepared_ratios(),
            })?
    };
    net.active_ratio = Some(ratio);
    Ok(markers)
}
