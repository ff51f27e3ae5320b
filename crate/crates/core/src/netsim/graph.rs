//! Network graph: an ordered list of nodes over numbered values.
//!
//! Value 0 is the network input and value `i + 1` is the output of node `i`.
//! Every node reads its `input` value; residual adds also read `skip`.
//! Sample tensors are `[C]` or `[C, H, W]` with channels on axis 0.

use serde::{Deserialize, Serialize};

use crate::bitlower::{ExtractionMode, ExtractionPlan, LayerShifts};
use crate::error::{Error, Result};
use crate::kernels::{default_groups, lower_weights, origin_order, ActScales, ConvGeometry, FeatureGroup};
use crate::qtensor::{ChannelRange, FloatTensor, ScaleGranularity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MatmulKind {
    Linear,
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
}

/// Quantized state of a matmul layer, all in current (possibly laid-out)
/// channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub act_range: ChannelRange,
    pub act_scales: ActScales,
    /// Weight codes, same shape as the float weight.
    pub weight_codes: Vec<i8>,
    /// One scale per output channel.
    pub weight_scales: Vec<f32>,
    pub shifts: LayerShifts,
    /// Weight codes lowered at their planned shifts.
    pub nibbles: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatmulLayer {
    pub kind: MatmulKind,
    /// `[out, in]` or `[out, in, kh, kw]`.
    pub weight: FloatTensor,
    pub bias: Vec<f32>,
    pub groups: Vec<FeatureGroup>,
    pub quant: Option<LayerQuant>,
    origin_order: Vec<usize>,
}

impl MatmulLayer {
    pub fn new(kind: MatmulKind, weight: FloatTensor, bias: Vec<f32>, group_size: usize) -> Result<Self> {
        let shape = weight.shape();
        let rank_ok = match kind {
            MatmulKind::Linear => shape.len() == 2,
            MatmulKind::Conv2d { kernel_h, kernel_w, stride, .. } => {
                shape.len() == 4 && shape[2] == kernel_h && shape[3] == kernel_w && stride > 0
            }
        };
        if !rank_ok {
            return Err(Error::InvalidGraph(format!(
                "weight shape {shape:?} does not match {kind:?}"
            )));
        }
        if bias.len() != shape[0] {
            return Err(Error::InvalidGraph(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                shape[0]
            )));
        }
        let groups = default_groups(shape[1], group_size);
        Ok(Self::with_groups(kind, weight, bias, groups))
    }

    pub(crate) fn with_groups(
        kind: MatmulKind,
        weight: FloatTensor,
        bias: Vec<f32>,
        groups: Vec<FeatureGroup>,
    ) -> Self {
        let origin_order = origin_order(&groups);
        MatmulLayer {
            kind,
            weight,
            bias,
            groups,
            quant: None,
            origin_order,
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Kernel taps per feature channel (1 for linear layers).
    pub fn taps(&self) -> usize {
        self.weight.shape()[2..].iter().product()
    }

    /// Group indices in original group order.
    pub fn origin_order(&self) -> &[usize] {
        &self.origin_order
    }

    pub fn geometry(&self, input_shape: &[usize]) -> Option<ConvGeometry> {
        match self.kind {
            MatmulKind::Linear => None,
            MatmulKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => Some(ConvGeometry {
                channels: input_shape[0],
                height: input_shape[1],
                width: input_shape[2],
                kernel_h,
                kernel_w,
                stride,
                padding,
            }),
        }
    }

    /// Multiply-accumulates per sample for one feature channel.
    pub fn macs_per_channel(&self, input_shape: &[usize]) -> usize {
        let positions = match self.geometry(input_shape) {
            None => 1,
            Some(g) => {
                let (oh, ow) = g.out_hw();
                oh * ow
            }
        };
        self.outputs() * self.taps() * positions
    }

    pub(crate) fn refresh_nibbles(&mut self) {
        let taps = self.taps();
        let outputs = self.outputs();
        if let Some(q) = self.quant.as_mut() {
            q.nibbles = lower_weights(&q.weight_codes, outputs, taps, &self.groups, &q.shifts.weight);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Matmul(MatmulLayer),
    Relu,
    Gelu,
    /// `[C, H, W]` to `[C]`.
    GlobalAvgPool,
    /// Residual add of the `skip` value onto the input value.
    Add { skip: usize },
    /// Runtime channel gather: output channel `k` is input channel `gather[k]`.
    Reorder { gather: Vec<usize> },
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Matmul(m) => match m.kind {
                MatmulKind::Linear => "linear",
                MatmulKind::Conv2d { .. } => "conv2d",
            },
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Add { .. } => "add",
            Op::Reorder { .. } => "reorder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub input: usize,
    pub op: Op,
}

/// Chosen 4-bit groups at one ratio, one flag vector per selectable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub ratio: f64,
    pub flags: Vec<Vec<bool>>,
}

/// Per matmul layer `max_4bit_ch` at one ratio (0 for fixed 8-bit layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBoundary {
    pub ratio: f64,
    pub max_4bit_ch: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub act_granularity: ScaleGranularity,
    pub mode: ExtractionMode,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            act_granularity: ScaleGranularity::PerTensor,
            mode: ExtractionMode::Static,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub input_shape: Vec<usize>,
    pub group_size: usize,
    pub nodes: Vec<Node>,
    /// Static reorder of input channels applied when samples are loaded.
    pub input_order: Option<Vec<usize>>,
    /// First and last matmul layers stay 8-bit in mixed runs.
    pub keep_ends_8bit: bool,
    pub quant: Option<QuantConfig>,
    pub selections: Vec<Selection>,
    pub boundaries: Vec<RatioBoundary>,
    pub active_ratio: Option<f64>,
}

impl NetworkGraph {
    pub fn new(input_shape: Vec<usize>, group_size: usize) -> Self {
        NetworkGraph {
            input_shape,
            group_size: group_size.max(1),
            nodes: Vec::new(),
            input_order: None,
            keep_ends_8bit: true,
            quant: None,
            selections: Vec::new(),
            boundaries: Vec::new(),
            active_ratio: None,
        }
    }

    /// Appends a node reading the most recent value; returns its output value id.
    pub fn push(&mut self, name: impl Into<String>, op: Op) -> usize {
        let input = self.nodes.len();
        self.push_from(name, input, op)
    }

    pub fn push_from(&mut self, name: impl Into<String>, input: usize, op: Op) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            input,
            op,
        });
        self.nodes.len()
    }

    pub fn output_value(&self) -> usize {
        self.nodes.len()
    }

    /// Shape of every value, checking consistency along the way.
    pub fn value_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, node) in self.nodes.iter().enumerate() {
            let bad = |msg: String| Error::InvalidGraph(format!("node {} ({}): {msg}", i, node.name));
            if node.input > i {
                return Err(bad(format!("reads future value {}", node.input)));
            }
            let inp = &shapes[node.input];
            let out = match &node.op {
                Op::Matmul(m) => {
                    if inp.is_empty() || inp[0] != m.features() {
                        return Err(bad(format!("input {inp:?} has wrong channel count")));
                    }
                    match m.geometry(inp) {
                        None if inp.len() == 1 => vec![m.outputs()],
                        Some(g) if inp.len() == 3 => {
                            let (oh, ow) = g.out_hw();
                            if g.height + 2 * g.padding < g.kernel_h || g.width + 2 * g.padding < g.kernel_w {
                                return Err(bad("kernel larger than padded input".into()));
                            }
                            vec![m.outputs(), oh, ow]
                        }
                        _ => return Err(bad(format!("input rank {} unsupported", inp.len()))),
                    }
                }
                Op::Relu | Op::Gelu => inp.clone(),
                Op::GlobalAvgPool => {
                    if inp.len() != 3 {
                        return Err(bad("pooling needs [C, H, W]".into()));
                    }
                    vec![inp[0]]
                }
                Op::Add { skip } => {
                    if *skip > i {
                        return Err(bad(format!("skip reads future value {skip}")));
                    }
                    if &shapes[*skip] != inp {
                        return Err(bad(format!("residual shapes {:?} vs {inp:?}", shapes[*skip])));
                    }
                    inp.clone()
                }
                Op::Reorder { gather } => {
                    let mut seen = vec![false; inp[0]];
                    if gather.len() != inp[0] || gather.iter().any(|&g| g >= inp[0] || std::mem::replace(&mut seen[g], true)) {
                        return Err(bad("gather is not a channel permutation".into()));
                    }
                    inp.clone()
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.value_shapes().map(|_| ())
    }

    /// Node indices of matmul layers in execution order.
    pub fn matmul_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Matmul(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Node indices of matmul layers eligible for 4-bit groups.
    pub fn selectable_nodes(&self) -> Vec<usize> {
        let mm = self.matmul_nodes();
        if self.keep_ends_8bit {
            if mm.len() <= 2 {
                return Vec::new();
            }
            mm[1..mm.len() - 1].to_vec()
        } else {
            mm
        }
    }

    pub fn matmul(&self, node: usize) -> Option<&MatmulLayer> {
        match &self.nodes.get(node)?.op {
            Op::Matmul(m) => Some(m),
            _ => None,
        }
    }

    pub fn matmul_mut(&mut self, node: usize) -> Option<&mut MatmulLayer> {
        match &mut self.nodes.get_mut(node)?.op {
            Op::Matmul(m) => Some(m),
            _ => None,
        }
    }

    /// Group count of each selectable layer.
    pub fn selectable_group_counts(&self) -> Vec<usize> {
        self.selectable_nodes()
            .iter()
            .map(|&n| self.matmul(n).map_or(0, |m| m.groups.len()))
            .collect()
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
            && self
                .matmul_nodes()
                .iter()
                .all(|&n| self.matmul(n).is_some_and(|m| m.quant.is_some()))
    }

    pub fn is_laid_out(&self) -> bool {
        !self.boundaries.is_empty()
    }

    pub fn count_reorders(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Reorder { .. }))
            .count()
    }

    /// Extraction shifts of every matmul layer, in node order.
    pub fn extraction_plan(&self) -> Option<ExtractionPlan> {
        let cfg = self.quant?;
        let layers = self
            .matmul_nodes()
            .iter()
            .map(|&n| self.matmul(n).and_then(|m| m.quant.as_ref()).map(|q| q.shifts.clone()))
            .collect::<Option<Vec<_>>>()?;
        Some(ExtractionPlan { mode: cfg.mode, layers })
    }

    /// Replaces every layer's shifts (e.g. with the naive top-nibble plan).
    pub fn set_extraction_plan(&mut self, plan: &ExtractionPlan) -> Result<()> {
        let mm = self.matmul_nodes();
        if plan.layers.len() != mm.len() {
            return Err(Error::InvalidConfig(format!(
                "plan has {} layers, network has {}",
                plan.layers.len(),
                mm.len()
            )));
        }
        for (&n, shifts) in mm.iter().zip(&plan.layers) {
            let m = self.matmul_mut(n).expect("matmul node");
            let (groups, outputs) = (m.groups.len(), m.outputs());
            let q = m.quant.as_mut().ok_or(Error::NotPrepared("extraction (run calibrate first)"))?;
            if shifts.act.len() != groups || shifts.weight.len() != groups || shifts.weight.iter().any(|w| w.len() != outputs) {
                return Err(Error::InvalidConfig(format!("plan shape mismatch for {}", shifts.layer)));
            }
            q.shifts = shifts.clone();
            m.refresh_nibbles();
        }
        if let Some(cfg) = self.quant.as_mut() {
            cfg.mode = plan.mode;
        }
        Ok(())
    }

    pub fn prepared_ratios(&self) -> Vec<f64> {
        if self.is_laid_out() {
            self.boundaries.iter().map(|b| b.ratio).collect()
        } else {
            self.selections.iter().map(|s| s.ratio).collect()
        }
    }
}

/// Whether two ratios name the same prepared selection.
pub fn same_ratio(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}
