//! Effective-bit extraction: lowering 8-bit codes to 4-bit fields that skip
//! the sign-extension bits a channel group never uses.
//!
//! A group whose codes all fit in `b` signed bits is lowered with an
//! arithmetic right shift of `max(0, b - 4)`; the lowered value represents
//! `q4 << shift`. Static shifts come from calibrated code ranges, dynamic
//! shifts from OR-accumulating the codes actually seen at runtime.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest shift: an 8-bit code lowered into a 4-bit field drops at most 4 bits.
pub const MAX_SHIFT: u8 = 4;

const Q4_MIN: i32 = -8;
const Q4_MAX: i32 = 7;

/// Minimal signed bitwidth holding every value of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EffectiveBitwidth(u8);

impl EffectiveBitwidth {
    pub fn new(bits: u8) -> Option<Self> {
        (1..=8).contains(&bits).then_some(EffectiveBitwidth(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn unused_bits(self) -> u8 {
        8 - self.0
    }
}

/// Magnitude pattern whose highest set bit bounds the signed width:
/// the value itself when non-negative, its one's complement otherwise.
#[inline]
fn magnitude_bits(v: i32) -> u32 {
    (v ^ (v >> 31)) as u32
}

#[inline]
fn width_of_pattern(acc: u32) -> u8 {
    (33 - acc.leading_zeros()).min(32) as u8
}

/// Signed width of a single code.
#[inline]
pub fn code_width(v: i32) -> u8 {
    width_of_pattern(magnitude_bits(v))
}

pub fn effective_bitwidth(values: &[i32]) -> Result<EffectiveBitwidth> {
    let first = values.first().ok_or(Error::EmptyGroup)?;
    let (lo, hi) = values
        .iter()
        .fold((*first, *first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo < -128 || hi > 127 {
        return Err(Error::InvalidParams(format!(
            "codes [{lo}, {hi}] exceed the 8-bit range"
        )));
    }
    Ok(range_bitwidth(lo, hi))
}

/// Effective bitwidth of the closed code interval `[lo, hi]`.
pub fn range_bitwidth(lo: i32, hi: i32) -> EffectiveBitwidth {
    EffectiveBitwidth(code_width(lo).max(code_width(hi)).clamp(1, 8))
}

pub fn static_shift(b: EffectiveBitwidth) -> u8 {
    b.0.saturating_sub(4)
}

/// Lowers `q8` to a 4-bit code at `shift`; the flag reports saturation.
#[inline]
pub fn extract4(q8: i32, shift: u8) -> (i32, bool) {
    debug_assert!(shift <= MAX_SHIFT);
    let v = q8 >> shift;
    let c = v.clamp(Q4_MIN, Q4_MAX);
    (c, c != v)
}

/// Runtime shift for a group of codes, via OR-accumulation then
/// highest-set-bit lookup.
pub fn dynamic_shift(group: &[i8]) -> u8 {
    let acc = group
        .iter()
        .fold(0u32, |acc, &v| acc | magnitude_bits(i32::from(v)));
    width_of_pattern(acc).max(1).saturating_sub(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[default]
    Static,
    Dynamic,
}

/// Shifts for one matmul layer. `act[g]` is the activation shift of
/// feature group `g`; `weight[g][o]` the weight shift of that group's slice
/// in output channel `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShifts {
    pub layer: String,
    pub act: Vec<u8>,
    pub weight: Vec<Vec<u8>>,
}

impl LayerShifts {
    /// All shifts at the naive top-nibble position.
    pub fn naive(layer: &str, groups: usize, outputs: usize) -> Self {
        LayerShifts {
            layer: layer.to_string(),
            act: vec![MAX_SHIFT; groups],
            weight: vec![vec![MAX_SHIFT; outputs]; groups],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPlan {
    pub mode: ExtractionMode,
    pub layers: Vec<LayerShifts>,
}

/// Calibrated code ranges for one layer: activation ranges per feature
/// channel and weight ranges per (output channel, feature channel).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCodeRanges {
    pub layer: String,
    pub features: usize,
    pub act: Vec<(i32, i32)>,
    pub weight: Vec<Vec<(i32, i32)>>,
}

/// Contiguous channel spans of `features` channels in groups of `group_size`.
pub fn group_spans(features: usize, group_size: usize) -> Vec<std::ops::Range<usize>> {
    let g = group_size.max(1);
    (0..features.div_ceil(g))
        .map(|k| k * g..((k + 1) * g).min(features))
        .collect()
}

fn span_shift(ranges: &[(i32, i32)], span: std::ops::Range<usize>) -> u8 {
    let (lo, hi) = ranges[span]
        .iter()
        .fold((0, 0), |(lo, hi), &(a, b)| (lo.min(a), hi.max(b)));
    static_shift(range_bitwidth(lo.max(-128), hi.min(127)))
}

/// Builds static shifts for every layer. In dynamic mode the static shifts
/// are kept as fallbacks and the plan is flagged dynamic.
pub fn plan_extraction(
    layers: &[LayerCodeRanges],
    group_size: usize,
    mode: ExtractionMode,
) -> Result<ExtractionPlan> {
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let spans = group_spans(l.features, group_size);
        if l.act.len() < l.features {
            return Err(Error::MissingRange {
                layer: l.layer.clone(),
                group: l.act.len() / group_size.max(1),
            });
        }
        if let Some((o, row)) = l.weight.iter().enumerate().find(|(_, r)| r.len() < l.features) {
            return Err(Error::MissingRange {
                layer: format!("{} (output channel {o})", l.layer),
                group: row.len() / group_size.max(1),
            });
        }
        let act = spans.iter().map(|s| span_shift(&l.act, s.clone())).collect();
        let weight = spans
            .iter()
            .map(|s| l.weight.iter().map(|row| span_shift(row, s.clone())).collect())
            .collect();
        out.push(LayerShifts {
            layer: l.layer.clone(),
            act,
            weight,
        });
    }
    Ok(ExtractionPlan { mode, layers: out })
}
