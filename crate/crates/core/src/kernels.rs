//! Reference mixed 4/8-bit kernels.
//!
//! Feature channels are split into groups; a group either multiplies its
//! 8-bit codes directly or multiplies the 4-bit fields extracted at the
//! group's activation/weight shifts and shifts the group partial sum left by
//! `p_x + p_w`. Every group keeps its own 32-bit integer accumulator, so the
//! final float combine can follow a fixed group order and results do not
//! depend on the memory layout or the parallel schedule.

use serde::{Deserialize, Serialize};

use crate::bitlower::{dynamic_shift, extract4, ExtractionMode};
use crate::error::{Error, Result};
use crate::par::Schedule;

/// A contiguous run of feature channels sharing one bitwidth assignment.
/// `origin` is the group's index before any layout reordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub start: usize,
    pub len: usize,
    pub origin: usize,
}

impl FeatureGroup {
    pub fn span(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Default groups: consecutive chunks of `group_size`, last one partial.
pub fn default_groups(features: usize, group_size: usize) -> Vec<FeatureGroup> {
    crate::bitlower::group_spans(features, group_size)
        .into_iter()
        .enumerate()
        .map(|(origin, s)| FeatureGroup {
            start: s.start,
            len: s.len(),
            origin,
        })
        .collect()
}

/// Low-bit flags for the leading groups covering `max_4bit_ch` channels.
pub fn prefix_flags(groups: &[FeatureGroup], max_4bit_ch: usize, layer: &str) -> Result<Vec<bool>> {
    let mut covered = 0;
    let mut flags = vec![false; groups.len()];
    for (flag, g) in flags.iter_mut().zip(groups) {
        if covered == max_4bit_ch {
            break;
        }
        covered += g.len;
        *flag = true;
    }
    if covered != max_4bit_ch {
        return Err(Error::UnalignedBoundary {
            layer: layer.to_string(),
            value: max_4bit_ch,
        });
    }
    Ok(flags)
}

/// Activation scale(s) of a quantized layer input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActScales {
    PerTensor(f32),
    /// One scale per feature group, in current group order.
    PerGroup(Vec<f32>),
}

impl ActScales {
    pub fn for_group(&self, g: usize) -> f32 {
        match self {
            ActScales::PerTensor(s) => *s,
            ActScales::PerGroup(v) => v[g],
        }
    }
}

/// Per-element lowering outcome for one activation vector.
#[derive(Debug, Clone, Default)]
pub struct Lowered {
    /// 4-bit fields for channels of low groups, 0 elsewhere.
    pub codes: Vec<i8>,
    /// Shift applied per group (0 for 8-bit groups).
    pub shifts: Vec<u8>,
    /// Channels (positions) where extraction clipped at least one value.
    pub saturated: Vec<bool>,
}

/// Lowers the low-bit groups of a `[channels, positions]` activation block.
/// Shifts come from `static_shifts` or, in dynamic mode, from the codes.
pub fn lower_activations(
    x: &[i8],
    positions: usize,
    groups: &[FeatureGroup],
    low: &[bool],
    static_shifts: &[u8],
    mode: ExtractionMode,
) -> Lowered {
    let channels = x.len() / positions.max(1);
    let mut out = Lowered {
        codes: vec![0; x.len()],
        shifts: vec![0; groups.len()],
        saturated: vec![false; channels],
    };
    for (gi, g) in groups.iter().enumerate() {
        if !low[gi] {
            continue;
        }
        let block = &x[g.start * positions..(g.start + g.len) * positions];
        let shift = match mode {
            ExtractionMode::Static => static_shifts[gi],
            ExtractionMode::Dynamic => dynamic_shift(block),
        };
        out.shifts[gi] = shift;
        for c in g.span() {
            for p in 0..positions {
                let (q4, sat) = extract4(i32::from(x[c * positions + p]), shift);
                out.codes[c * positions + p] = q4 as i8;
                out.saturated[c] |= sat;
            }
        }
    }
    out
}

/// Lowers weight codes `[outputs, features * taps]` for the given groups.
/// This is the cached-nibble form; the on-the-fly kernels compute the same
/// fields inside the inner loop.
pub fn lower_weights(
    w: &[i8],
    outputs: usize,
    taps: usize,
    groups: &[FeatureGroup],
    shifts: &[Vec<u8>],
) -> Vec<i8> {
    let row = w.len() / outputs.max(1);
    let mut out = vec![0i8; w.len()];
    for o in 0..outputs {
        for (gi, g) in groups.iter().enumerate() {
            let s = shifts[gi][o];
            for i in g.start * taps..(g.start + g.len) * taps {
                out[o * row + i] = extract4(i32::from(w[o * row + i]), s).0 as i8;
            }
        }
    }
    out
}

/// Where 4-bit weight fields come from.
#[derive(Debug, Clone, Copy)]
pub enum WeightNibbles<'a> {
    /// Extract from the 8-bit codes on every use.
    OnTheFly,
    /// Use fields produced by [`lower_weights`].
    Cached(&'a [i8]),
}

#[derive(Debug, Clone)]
pub struct MixedGemmArgs<'a> {
    /// Activation codes, `[rows, features]` row-major.
    pub x: &'a [i8],
    pub rows: usize,
    /// Weight codes, `[outputs, features]` row-major.
    pub w: &'a [i8],
    pub outputs: usize,
    pub features: usize,
    pub groups: &'a [FeatureGroup],
    /// Leading channels computed in 4-bit; must end on a group boundary.
    pub max_4bit_ch: usize,
    pub act_shift: &'a [u8],
    /// `[group][output]` weight shifts.
    pub w_shift: &'a [Vec<u8>],
    pub mode: ExtractionMode,
    pub nibbles: WeightNibbles<'a>,
}

/// Integer group accumulators, `[rows, outputs, groups]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAccumulators {
    pub rows: usize,
    pub outputs: usize,
    pub groups: usize,
    pub acc: Vec<i32>,
    /// Per row, per feature channel saturation flags of the activation lowering.
    pub saturated: Vec<Vec<bool>>,
}

impl GroupAccumulators {
    pub fn group_slice(&self, row: usize, o: usize) -> &[i32] {
        let base = (row * self.outputs + o) * self.groups;
        &self.acc[base..base + self.groups]
    }

    /// Sum over groups; exact in 32 bits for supported shapes.
    pub fn total(&self, row: usize, o: usize) -> i32 {
        self.group_slice(row, o).iter().sum()
    }
}

/// Combines group accumulators into a float output value:
/// `acc * S_x * S_w[o]` for a per-tensor activation scale, otherwise the
/// per-group products summed in group `origin` order.
pub fn combine(
    acc: &[i32],
    groups: &[FeatureGroup],
    origin_order: &[usize],
    act: &ActScales,
    w_scale: f32,
) -> f32 {
    match act {
        ActScales::PerTensor(s) => {
            let total: i32 = acc.iter().sum();
            total as f32 * (s * w_scale)
        }
        ActScales::PerGroup(scales) => {
            debug_assert_eq!(groups.len(), scales.len());
            let sum: f64 = origin_order
                .iter()
                .map(|&g| f64::from(acc[g]) * f64::from(scales[g]))
                .sum();
            (sum as f32) * w_scale
        }
    }
}

/// Group indices sorted by `origin`.
pub fn origin_order(groups: &[FeatureGroup]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    idx.sort_by_key(|&g| groups[g].origin);
    idx
}

/// Longest reduction (features times taps) whose 8-bit products cannot
/// overflow a 32-bit accumulator: 2^16 * 2^14 < 2^31.
pub const MAX_REDUCTION: usize = 1 << 16;

fn check_common(
    groups: &[FeatureGroup],
    features: usize,
    taps: usize,
    act_shift: &[u8],
    w_shift: &[Vec<u8>],
    outputs: usize,
) -> Result<()> {
    if features * taps > MAX_REDUCTION {
        return Err(Error::InvalidParams(format!(
            "reduction of {} exceeds {MAX_REDUCTION}, 32-bit accumulators could overflow",
            features * taps
        )));
    }
    let covered: usize = groups.iter().map(|g| g.len).sum();
    if covered != features {
        return Err(Error::InvalidParams(format!(
            "groups cover {covered} of {features} channels"
        )));
    }
    if act_shift.len() != groups.len() || w_shift.len() != groups.len() {
        return Err(Error::InvalidParams("shift tables do not match groups".into()));
    }
    if w_shift.iter().any(|r| r.len() != outputs) {
        return Err(Error::InvalidParams("weight shifts do not match outputs".into()));
    }
    Ok(())
}

#[inline]
fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &w)| i32::from(x) * i32::from(w)).sum()
}

#[inline]
fn dot_lowered_on_the_fly(x4: &[i8], w: &[i8], shift: u8) -> i32 {
    x4.iter()
        .zip(w)
        .map(|(&x, &w)| i32::from(x) * extract4(i32::from(w), shift).0)
        .sum()
}

/// Mixed-precision GEMM with the 4-bit region given by `max_4bit_ch`.
pub fn mixed_gemm(args: &MixedGemmArgs<'_>, schedule: Schedule) -> Result<GroupAccumulators> {
    let low = prefix_flags(args.groups, args.max_4bit_ch, "gemm")?;
    mixed_gemm_flags(args, &low, schedule)
}

/// Mixed-precision GEMM with arbitrary (scattered) low-bit group flags.
pub fn mixed_gemm_flags(
    args: &MixedGemmArgs<'_>,
    low: &[bool],
    schedule: Schedule,
) -> Result<GroupAccumulators> {
    let (rows, outputs, features) = (args.rows, args.outputs, args.features);
    if args.x.len() != rows * features || args.w.len() != outputs * features {
        return Err(Error::InvalidParams("gemm operand sizes do not match".into()));
    }
    check_common(args.groups, features, 1, args.act_shift, args.w_shift, outputs)?;
    if low.len() != args.groups.len() {
        return Err(Error::InvalidParams("flag count does not match groups".into()));
    }
    if let WeightNibbles::Cached(c) = args.nibbles {
        if c.len() != args.w.len() {
            return Err(Error::InvalidParams("cached nibbles do not match weights".into()));
        }
    }
    let ng = args.groups.len();

    // Lowering is done on a column-major view so each group's block is
    // contiguous; for GEMM that is the transpose of x.
    let lowered: Vec<Lowered> = (0..rows)
        .map(|r| {
            let row = &args.x[r * features..(r + 1) * features];
            lower_activations(row, 1, args.groups, low, args.act_shift, args.mode)
        })
        .collect();

    // Dynamic mode applies one shift per group across all rows of the call.
    let lowered = if args.mode == ExtractionMode::Dynamic && rows > 1 {
        let mut shifts = vec![0u8; ng];
        for (gi, g) in args.groups.iter().enumerate() {
            if low[gi] {
                let mut block = Vec::with_capacity(rows * g.len);
                for r in 0..rows {
                    block.extend_from_slice(&args.x[r * features + g.start..r * features + g.start + g.len]);
                }
                shifts[gi] = dynamic_shift(&block);
            }
        }
        (0..rows)
            .map(|r| {
                let row = &args.x[r * features..(r + 1) * features];
                lower_activations(row, 1, args.groups, low, &shifts, ExtractionMode::Static)
            })
            .collect()
    } else {
        lowered
    };

    let mut acc = vec![0i32; rows * outputs * ng];
    schedule.for_each_chunk(&mut acc, outputs * ng, |r, out| {
        let x = &args.x[r * features..(r + 1) * features];
        let lo = &lowered[r];
        for o in 0..outputs {
            let w = &args.w[o * features..(o + 1) * features];
            for (gi, g) in args.groups.iter().enumerate() {
                let span = g.span();
                out[o * ng + gi] = if low[gi] {
                    let ws = args.w_shift[gi][o];
                    let part = match args.nibbles {
                        WeightNibbles::OnTheFly => {
                            dot_lowered_on_the_fly(&lo.codes[span.clone()], &w[span], ws)
                        }
                        WeightNibbles::Cached(c) => {
                            dot_i8(&lo.codes[span.clone()], &c[o * features..(o + 1) * features][span])
                        }
                    };
                    part << (u32::from(lo.shifts[gi]) + u32::from(ws))
                } else {
                    dot_i8(&x[span.clone()], &w[span])
                };
            }
        }
    });
    Ok(GroupAccumulators {
        rows,
        outputs,
        groups: ng,
        acc,
        saturated: lowered.into_iter().map(|l| l.saturated).collect(),
    })
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding).saturating_sub(self.kernel_h) / self.stride.max(1) + 1;
        let ow = (self.width + 2 * self.padding).saturating_sub(self.kernel_w) / self.stride.max(1) + 1;
        (oh, ow)
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }
}

#[derive(Debug, Clone)]
pub struct MixedConvArgs<'a> {
    /// Input codes `[channels, height, width]`.
    pub x: &'a [i8],
    /// Weight codes `[outputs, channels, kernel_h, kernel_w]`.
    pub w: &'a [i8],
    pub outputs: usize,
    pub geometry: ConvGeometry,
    pub groups: &'a [FeatureGroup],
    pub max_4bit_ch: usize,
    pub act_shift: &'a [u8],
    pub w_shift: &'a [Vec<u8>],
    pub mode: ExtractionMode,
    pub nibbles: WeightNibbles<'a>,
}

pub fn mixed_conv2d(args: &MixedConvArgs<'_>, schedule: Schedule) -> Result<GroupAccumulators> {
    let low = prefix_flags(args.groups, args.max_4bit_ch, "conv2d")?;
    mixed_conv2d_flags(args, &low, schedule)
}

/// Accumulators are laid out with one "row" per output position:
/// `[positions, outputs, groups]`.
pub fn mixed_conv2d_flags(
    args: &MixedConvArgs<'_>,
    low: &[bool],
    schedule: Schedule,
) -> Result<GroupAccumulators> {
    let geo = args.geometry;
    let (c_in, h, w_) = (geo.channels, geo.height, geo.width);
    let taps = geo.taps();
    if args.x.len() != c_in * h * w_ || args.w.len() != args.outputs * c_in * taps {
        return Err(Error::InvalidParams("conv operand sizes do not match".into()));
    }
    if geo.stride == 0 || geo.kernel_h == 0 || geo.kernel_w == 0 {
        return Err(Error::InvalidParams("degenerate convolution geometry".into()));
    }
    check_common(args.groups, c_in, taps, args.act_shift, args.w_shift, args.outputs)?;
    if low.len() != args.groups.len() {
        return Err(Error::InvalidParams("flag count does not match groups".into()));
    }
    let lowered = lower_activations(args.x, h * w_, args.groups, low, args.act_shift, args.mode);
    let (oh, ow) = geo.out_hw();
    let positions = oh * ow;
    let ng = args.groups.len();
    let outputs = args.outputs;
    let row_len = c_in * taps;

    let mut acc = vec![0i32; positions * outputs * ng];
    schedule.for_each_chunk(&mut acc, outputs * ng, |pos, out| {
        let (oy, ox) = (pos / ow, pos % ow);
        for o in 0..outputs {
            let wrow = &args.w[o * row_len..(o + 1) * row_len];
            for (gi, g) in args.groups.iter().enumerate() {
                let is_low = low[gi];
                let ws = args.w_shift[gi][o];
                let mut part = 0i32;
                for c in g.span() {
                    for ky in 0..geo.kernel_h {
                        let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..geo.kernel_w {
                            let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                            if ix < 0 || ix >= w_ as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * w_ + ix as usize;
                            let wi = c * taps + ky * geo.kernel_w + kx;
                            part += if is_low {
                                let wv = match args.nibbles {
                                    WeightNibbles::OnTheFly => extract4(i32::from(wrow[wi]), ws).0,
                                    WeightNibbles::Cached(cn) => i32::from(cn[o * row_len + wi]),
                                };
                                i32::from(lowered.codes[xi]) * wv
                            } else {
                                i32::from(args.x[xi]) * i32::from(wrow[wi])
                            };
                        }
                    }
                }
                out[o * ng + gi] = if is_low {
                    part << (u32::from(lowered.shifts[gi]) + u32::from(ws))
                } else {
                    part
                };
            }
        }
    });
    Ok(GroupAccumulators {
        rows: positions,
        outputs,
        groups: ng,
        acc,
        saturated: vec![lowered.saturated],
    })
}

/// Worst-case absolute accumulator deviation of the mixed result from the
/// pure 8-bit result for one output channel, given the maximum code
/// magnitudes of the low-group operands. Per product, with truncation
/// errors `e_x < 2^p_x` and `e_w < 2^p_w`:
/// `|x w - x' w'| <= |x| e_w + |w| e_x + e_x e_w`.
pub fn deviation_bound(
    groups: &[FeatureGroup],
    low: &[bool],
    act_shift: &[u8],
    w_shift: &[Vec<u8>],
    o: usize,
    max_abs_x: &[i32],
    max_abs_w: &[i32],
    taps: usize,
) -> i64 {
    groups
        .iter()
        .enumerate()
        .filter(|(gi, _)| low[*gi])
        .map(|(gi, g)| {
            let ex = (1i64 << act_shift[gi]) - 1;
            let ew = (1i64 << w_shift[gi][o]) - 1;
            let per = i64::from(max_abs_x[gi]) * ew + i64::from(max_abs_w[gi]) * ex + ex * ew;
            per * (g.len * taps) as i64
        })
        .sum()
}
