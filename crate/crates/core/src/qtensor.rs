//! Tensors, symmetric channel-wise quantization and range calibration.
//!
//! Quantization is symmetric and signed with no zero point:
//! `q = clip(round_half_even(x / S), q_min, q_max)` and `x' = q * S`.
//! Weight scales vary along the output-channel axis; activation scales are
//! either per tensor or per feature group (contiguous input channels).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale used for degenerate (all-zero) ranges.
pub const EPSILON_SCALE: f32 = 1e-8;

/// Default fraction of values a quantile-clipped range must cover.
pub const DEFAULT_COVERAGE: f32 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bitwidth {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Bitwidth {
    pub fn bits(self) -> u32 {
        match self {
            Bitwidth::Four => 4,
            Bitwidth::Eight => 8,
        }
    }

    pub fn q_min(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub fn q_max(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }
}

/// Which axes of a tensor carry feature (input) channels and output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Axes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<usize>,
}

impl Axes {
    pub fn activation() -> Self {
        Axes {
            feature: Some(0),
            output: None,
        }
    }

    pub fn weight() -> Self {
        Axes {
            feature: Some(1),
            output: Some(0),
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    axes: Axes,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, axes: Axes) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        for axis in [axes.feature, axes.output].into_iter().flatten() {
            if axis >= shape.len() {
                return Err(Error::InvalidParams(format!(
                    "axis {axis} out of range for shape {shape:?}"
                )));
            }
        }
        Ok(FloatTensor { shape, data, axes })
    }

    pub fn zeros(shape: Vec<usize>, axes: Axes) -> Self {
        let n = shape.iter().product();
        FloatTensor {
            shape,
            data: vec![0.0; n],
            axes,
        }
    }

    /// Wraps values produced internally that are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>, axes: Axes) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        FloatTensor { shape, data, axes }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn axes(&self) -> Axes {
        self.axes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Scale factors and integer bounds for one quantized tensor.
///
/// `scales` has length 1 (per tensor) or one entry per `group_size`
/// consecutive indices along `axis` (group size 1 means per channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f32>,
    pub bitwidth: Bitwidth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default = "one")]
    pub group_size: usize,
}

fn one() -> usize {
    1
}

impl QuantParams {
    pub fn per_tensor(scale: f32, bitwidth: Bitwidth) -> Result<Self> {
        Self::new(vec![scale], bitwidth, None, 1)
    }

    pub fn per_channel(scales: Vec<f32>, bitwidth: Bitwidth, axis: usize) -> Result<Self> {
        Self::new(scales, bitwidth, Some(axis), 1)
    }

    pub fn new(
        scales: Vec<f32>,
        bitwidth: Bitwidth,
        axis: Option<usize>,
        group_size: usize,
    ) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidParams("no scales".into()));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidParams(format!("scale {s} is not positive")));
        }
        if group_size == 0 {
            return Err(Error::InvalidParams("group size 0".into()));
        }
        if axis.is_none() && scales.len() != 1 {
            return Err(Error::InvalidParams(
                "multiple scales need a channel axis".into(),
            ));
        }
        Ok(QuantParams {
            scales,
            bitwidth,
            axis,
            group_size,
        })
    }

    pub fn q_min(&self) -> i32 {
        self.bitwidth.q_min()
    }

    pub fn q_max(&self) -> i32 {
        self.bitwidth.q_max()
    }

    /// Scale for channel index `c` along the scale axis.
    pub fn scale_for(&self, c: usize) -> f32 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[c / self.group_size]
        }
    }

    fn check_against(&self, shape: &[usize]) -> Result<()> {
        if let Some(axis) = self.axis {
            let extent = *shape.get(axis).ok_or_else(|| {
                Error::InvalidParams(format!("axis {axis} out of range for {shape:?}"))
            })?;
            let needed = extent.div_ceil(self.group_size);
            if self.scales.len() != 1 && self.scales.len() != needed {
                return Err(Error::InvalidParams(format!(
                    "{} scales for {} channels in groups of {}",
                    self.scales.len(),
                    extent,
                    self.group_size
                )));
            }
        }
        Ok(())
    }

    /// Quantizes one value with scale `s`.
    pub fn quantize_value(&self, x: f32, s: f32) -> i32 {
        quantize_scalar(x, s, self.bitwidth)
    }
}

/// `clip(round_half_even(x / s), q_min, q_max)`.
pub fn quantize_scalar(x: f32, s: f32, bitwidth: Bitwidth) -> i32 {
    let q = (x / s).round_ties_even();
    q.clamp(bitwidth.q_min() as f32, bitwidth.q_max() as f32) as i32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    params: QuantParams,
    axes: Axes,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, params: QuantParams, axes: Axes) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        params.check_against(&shape)?;
        let (lo, hi) = (params.q_min(), params.q_max());
        if let Some(v) = data.iter().find(|&&v| i32::from(v) < lo || i32::from(v) > hi) {
            return Err(Error::InvalidParams(format!(
                "code {v} outside [{lo}, {hi}]"
            )));
        }
        Ok(QuantizedTensor {
            shape,
            data,
            params,
            axes,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn axes(&self) -> Axes {
        self.axes
    }
}

/// Quantizes `x` element-wise with the channel-appropriate scale.
pub fn quantize(x: &FloatTensor, params: &QuantParams) -> Result<QuantizedTensor> {
    params.check_against(&x.shape)?;
    if let Some((index, &value)) = x.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let data = match params.axis {
        None => {
            let s = params.scales[0];
            x.data
                .iter()
                .map(|&v| quantize_scalar(v, s, params.bitwidth) as i8)
                .collect()
        }
        Some(axis) => {
            let (outer, extent, inner) = axis_split(&x.shape, axis);
            let mut out = Vec::with_capacity(x.data.len());
            for o in 0..outer {
                for c in 0..extent {
                    let s = params.scale_for(c);
                    let base = (o * extent + c) * inner;
                    out.extend(
                        x.data[base..base + inner]
                            .iter()
                            .map(|&v| quantize_scalar(v, s, params.bitwidth) as i8),
                    );
                }
            }
            out
        }
    };
    Ok(QuantizedTensor {
        shape: x.shape.clone(),
        data,
        params: params.clone(),
        axes: x.axes,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> FloatTensor {
    let params = &q.params;
    let data = match params.axis {
        None => {
            let s = params.scales[0];
            q.data.iter().map(|&v| f32::from(v) * s).collect()
        }
        Some(axis) => {
            let (outer, extent, inner) = axis_split(&q.shape, axis);
            let mut out = Vec::with_capacity(q.data.len());
            for o in 0..outer {
                for c in 0..extent {
                    let s = params.scale_for(c);
                    let base = (o * extent + c) * inner;
                    out.extend(q.data[base..base + inner].iter().map(|&v| f32::from(v) * s));
                }
            }
            out
        }
    };
    FloatTensor::from_parts(q.shape.clone(), data, q.axes)
}

/// Per-channel observed value ranges along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    pub coverage_quantile: f32,
}

impl ChannelRange {
    pub fn channels(&self) -> usize {
        self.min.len()
    }

    /// Absolute maximum over a span of channels.
    pub fn abs_max(&self, channels: std::ops::Range<usize>) -> f32 {
        channels
            .map(|c| self.min[c].abs().max(self.max[c].abs()))
            .fold(0.0, f32::max)
    }

    /// `(min, max)` over a span of channels.
    pub fn span(&self, channels: std::ops::Range<usize>) -> (f32, f32) {
        let lo = channels.clone().map(|c| self.min[c]).fold(f32::INFINITY, f32::min);
        let hi = channels.map(|c| self.max[c]).fold(f32::NEG_INFINITY, f32::max);
        (lo, hi)
    }

    /// Channel ranges in integer code units under `params`.
    pub fn to_codes(&self, params: &QuantParams) -> Vec<(i32, i32)> {
        (0..self.channels())
            .map(|c| {
                let s = params.scale_for(c);
                (
                    params.quantize_value(self.min[c], s),
                    params.quantize_value(self.max[c], s),
                )
            })
            .collect()
    }

    /// Reorders channels so that position `k` holds old channel `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> ChannelRange {
        ChannelRange {
            min: order.iter().map(|&c| self.min[c]).collect(),
            max: order.iter().map(|&c| self.max[c]).collect(),
            coverage_quantile: self.coverage_quantile,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    /// EMA momentum: `new = momentum * old + (1 - momentum) * batch`.
    pub momentum: f32,
    /// When set, batch extremes are replaced by the central quantile
    /// interval covering this fraction of each channel's values.
    pub coverage_quantile: Option<f32>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            momentum: 0.99,
            coverage_quantile: None,
        }
    }
}

/// Min/max (or quantile interval) per channel of a single tensor.
pub fn batch_range(x: &FloatTensor, axis: usize, coverage: Option<f32>) -> ChannelRange {
    let (outer, extent, inner) = axis_split(&x.shape, axis);
    let mut min = vec![f32::INFINITY; extent];
    let mut max = vec![f32::NEG_INFINITY; extent];
    match coverage {
        Some(q) if q < 1.0 => {
            let mut values = Vec::with_capacity(outer * inner);
            for c in 0..extent {
                values.clear();
                for o in 0..outer {
                    let base = (o * extent + c) * inner;
                    values.extend_from_slice(&x.data[base..base + inner]);
                }
                let (lo, hi) = quantile_interval(&mut values, q);
                min[c] = lo;
                max[c] = hi;
            }
        }
        _ => {
            for o in 0..outer {
                for c in 0..extent {
                    let base = (o * extent + c) * inner;
                    for &v in &x.data[base..base + inner] {
                        min[c] = min[c].min(v);
                        max[c] = max[c].max(v);
                    }
                }
            }
        }
    }
    for c in 0..extent {
        if min[c] > max[c] {
            min[c] = 0.0;
            max[c] = 0.0;
        }
    }
    ChannelRange {
        min,
        max,
        coverage_quantile: coverage.unwrap_or(1.0),
    }
}

/// Nearest-rank central interval holding fraction `q` of `values`.
fn quantile_interval(values: &mut [f32], q: f32) -> (f32, f32) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len();
    let tail = (1.0 - f64::from(q)) / 2.0;
    let lo_rank = ((tail * n as f64).floor() as usize).min(n - 1);
    let hi_rank = (((1.0 - tail) * n as f64).ceil() as usize)
        .saturating_sub(1)
        .clamp(lo_rank, n - 1);
    values.sort_unstable_by(f32::total_cmp);
    (values[lo_rank], values[hi_rank])
}

/// EMA of per-channel batch ranges over a calibration stream.
pub fn calibrate_ranges<'a, I>(batches: I, axis: usize, cfg: CalibrationConfig) -> Result<ChannelRange>
where
    I: IntoIterator<Item = &'a FloatTensor>,
{
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidParams(format!(
            "momentum {} outside [0, 1)",
            cfg.momentum
        )));
    }
    if let Some(q) = cfg.coverage_quantile {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidParams(format!("coverage {q} outside (0, 1]")));
        }
    }
    let mut acc: Option<ChannelRange> = None;
    for batch in batches {
        let r = batch_range(batch, axis, cfg.coverage_quantile);
        acc = Some(match acc {
            None => r,
            Some(mut prev) => {
                if prev.channels() != r.channels() {
                    return Err(Error::ShapeMismatch {
                        shape: batch.shape.clone(),
                        expected: prev.channels(),
                        actual: r.channels(),
                    });
                }
                let m = cfg.momentum;
                for c in 0..prev.channels() {
                    prev.min[c] = m * prev.min[c] + (1.0 - m) * r.min[c];
                    prev.max[c] = m * prev.max[c] + (1.0 - m) * r.max[c];
                }
                prev
            }
        });
    }
    let mut out = acc.ok_or(Error::EmptyCalibration)?;
    out.coverage_quantile = cfg.coverage_quantile.unwrap_or(DEFAULT_COVERAGE);
    Ok(out)
}

/// How many channels share one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleGranularity {
    PerTensor,
    PerChannel,
    PerGroup(usize),
}

/// Symmetric scales `max(|min|, |max|) / q_max` at the requested granularity.
pub fn derive_scales(
    ranges: &ChannelRange,
    bitwidth: Bitwidth,
    axis: usize,
    granularity: ScaleGranularity,
) -> Result<QuantParams> {
    let q_max = bitwidth.q_max() as f32;
    let scale = |abs: f32| if abs > 0.0 { abs / q_max } else { EPSILON_SCALE };
    let n = ranges.channels();
    match granularity {
        ScaleGranularity::PerTensor => QuantParams::per_tensor(scale(ranges.abs_max(0..n)), bitwidth)
            .map(|p| QuantParams {
                axis: Some(axis),
                ..p
            }),
        ScaleGranularity::PerChannel => QuantParams::per_channel(
            (0..n).map(|c| scale(ranges.abs_max(c..c + 1))).collect(),
            bitwidth,
            axis,
        ),
        ScaleGranularity::PerGroup(g) => {
            if g == 0 {
                return Err(Error::InvalidParams("group size 0".into()));
            }
            let scales = (0..n.div_ceil(g))
                .map(|k| scale(ranges.abs_max(k * g..((k + 1) * g).min(n))))
                .collect();
            QuantParams::new(scales, bitwidth, Some(axis), g)
        }
    }
}

/// Channel-wise weight parameters: one scale per output channel.
pub fn weight_params(w: &FloatTensor, bitwidth: Bitwidth) -> Result<QuantParams> {
    let axis = w.axes.output.unwrap_or(0);
    derive_scales(
        &batch_range(w, axis, None),
        bitwidth,
        axis,
        ScaleGranularity::PerChannel,
    )
}
