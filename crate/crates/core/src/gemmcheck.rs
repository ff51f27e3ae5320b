//! Randomized agreement check of the mixed kernels against a plain scalar
//! model: dequantize-with-shift per product, one exact accumulator per
//! (row, output, group).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitlower::{ExtractionMode, MAX_SHIFT};
use crate::error::Result;
use crate::kernels::{
    default_groups, lower_weights, mixed_conv2d, mixed_gemm, ConvGeometry, FeatureGroup, MixedConvArgs, MixedGemmArgs,
    WeightNibbles,
};
use crate::par::Schedule;
use crate::rng::split_rng;

pub const CHECK_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Smallest two's-complement width holding `v`.
fn signed_width(v: i64) -> u32 {
    let mut bits = 1;
    while v < -(1i64 << (bits - 1)) || v >= (1i64 << (bits - 1)) {
        bits += 1;
    }
    bits
}

fn slice4(v: i64, shift: u32) -> i64 {
    (v.div_euclid(1i64 << shift)).clamp(-8, 7)
}

/// `(x4 << px) * (w4 << pw)`, or the plain product for 8-bit groups.
fn oracle_product(x: i8, w: i8, low: bool, px: u32, pw: u32) -> i64 {
    if low {
        (slice4(i64::from(x), px) << px) * (slice4(i64::from(w), pw) << pw)
    } else {
        i64::from(x) * i64::from(w)
    }
}

fn oracle_dynamic_shift(values: impl Iterator<Item = i8>) -> u32 {
    values.map(|v| signed_width(i64::from(v))).max().unwrap_or(1).saturating_sub(4)
}

/// Scalar GEMM oracle, `[rows, outputs, groups]`. Dynamic shifts span all rows.
#[allow(clippy::too_many_arguments)]
pub fn oracle_gemm(
    x: &[i8],
    rows: usize,
    w: &[i8],
    outputs: usize,
    features: usize,
    groups: &[FeatureGroup],
    low: &[bool],
    act_shift: &[u8],
    w_shift: &[Vec<u8>],
    mode: ExtractionMode,
) -> Vec<i64> {
    let px: Vec<u32> = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| match mode {
            ExtractionMode::Static => u32::from(act_shift[gi]),
            ExtractionMode::Dynamic => {
                oracle_dynamic_shift((0..rows).flat_map(|r| g.span().map(move |c| x[r * features + c])))
            }
        })
        .collect();
    let mut out = Vec::with_capacity(rows * outputs * groups.len());
    for r in 0..rows {
        for o in 0..outputs {
            for (gi, g) in groups.iter().enumerate() {
                let pw = u32::from(w_shift[gi][o]);
                out.push(
                    g.span()
                        .map(|c| oracle_product(x[r * features + c], w[o * features + c], low[gi], px[gi], pw))
                        .sum(),
                );
            }
        }
    }
    out
}

/// Scalar conv oracle, `[positions, outputs, groups]`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_conv2d(
    x: &[i8],
    w: &[i8],
    outputs: usize,
    geo: ConvGeometry,
    groups: &[FeatureGroup],
    low: &[bool],
    act_shift: &[u8],
    w_shift: &[Vec<u8>],
    mode: ExtractionMode,
) -> Vec<i64> {
    let (h, wd) = (geo.height, geo.width);
    let px: Vec<u32> = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| match mode {
            ExtractionMode::Static => u32::from(act_shift[gi]),
            ExtractionMode::Dynamic => oracle_dynamic_shift(x[g.start * h * wd..(g.start + g.len) * h * wd].iter().copied()),
        })
        .collect();
    let (oh, ow) = geo.out_hw();
    let mut out = Vec::with_capacity(oh * ow * outputs * groups.len());
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..outputs {
                for (gi, g) in groups.iter().enumerate() {
                    let pw = u32::from(w_shift[gi][o]);
                    let mut sum = 0i64;
                    for c in g.span() {
                        for ky in 0..geo.kernel_h {
                            for kx in 0..geo.kernel_w {
                                let iy = (oy * geo.stride + ky) as i64 - geo.padding as i64;
                                let ix = (ox * geo.stride + kx) as i64 - geo.padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x[(c * h + iy as usize) * wd + ix as usize];
                                let wv = w[((o * geo.channels + c) * geo.kernel_h + ky) * geo.kernel_w + kx];
                                sum += oracle_product(xv, wv, low[gi], px[gi], pw);
                            }
                        }
                    }
                    out.push(sum);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    pub kernel: String,
    pub shape: String,
    pub group_size: usize,
    pub ratio: f64,
    pub mode: ExtractionMode,
    pub cached_nibbles: bool,
    pub mismatches: usize,
    /// Only checked at ratio 0: whether the result equals the plain int8 product.
    pub int8_identical: Option<bool>,
}

impl CaseResult {
    pub fn pass(&self) -> bool {
        self.mismatches == 0 && self.int8_identical != Some(false)
    }
}

fn codes(rng: &mut impl Rng, n: usize) -> Vec<i8> {
    // Mix full-range and narrow-range tensors so both shift regimes occur.
    let bound: i32 = [128, 128, 32, 8][rng.random_range(0..4)];
    (0..n).map(|_| rng.random_range(-bound..bound) as i8).collect()
}

fn shifts(rng: &mut impl Rng, groups: usize, outputs: usize) -> (Vec<u8>, Vec<Vec<u8>>) {
    let a = (0..groups).map(|_| rng.random_range(0..=MAX_SHIFT)).collect();
    let w = (0..groups).map(|_| (0..outputs).map(|_| rng.random_range(0..=MAX_SHIFT)).collect()).collect();
    (a, w)
}

fn prefix(groups: &[FeatureGroup], ratio: f64) -> (usize, Vec<bool>) {
    let k = (ratio * groups.len() as f64).round() as usize;
    let low: Vec<bool> = (0..groups.len()).map(|g| g < k).collect();
    (groups[..k].iter().map(|g| g.len).sum(), low)
}

/// Runs `cases` random GEMM and conv cases; shapes up to 64 in each
/// dimension, cycling through [`CHECK_RATIOS`].
pub fn run_sweep(seed: u64, cases: usize, schedule: Schedule) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = split_rng(seed, case as u64);
        let ratio = CHECK_RATIOS[case % CHECK_RATIOS.len()];
        let group_size = [1, 2, 4, 8, 16, 32][rng.random_range(0..6)];
        let mode = if rng.random_bool(0.5) { ExtractionMode::Static } else { ExtractionMode::Dynamic };
        let cached = rng.random_bool(0.5);
        let is_conv = case % 4 == 3;

        let (kernel, shape, got, expect, int8) = if is_conv {
            let geo = ConvGeometry {
                channels: rng.random_range(1..=16),
                height: rng.random_range(3..=8),
                width: rng.random_range(3..=8),
                kernel_h: rng.random_range(1..=3),
                kernel_w: rng.random_range(1..=3),
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..=1),
            };
            let outputs = rng.random_range(1..=16);
            let groups = default_groups(geo.channels, group_size);
            let x = codes(&mut rng, geo.channels * geo.height * geo.width);
            let w = codes(&mut rng, outputs * geo.channels * geo.taps());
            let (ash, wsh) = shifts(&mut rng, groups.len(), outputs);
            let (max4, low) = prefix(&groups, ratio);
            let nib = lower_weights(&w, outputs, geo.taps(), &groups, &wsh);
            let args = MixedConvArgs {
                x: &x,
                w: &w,
                outputs,
                geometry: geo,
                groups: &groups,
                max_4bit_ch: max4,
                act_shift: &ash,
                w_shift: &wsh,
                mode,
                nibbles: if cached { WeightNibbles::Cached(&nib) } else { WeightNibbles::OnTheFly },
            };
            let got = mixed_conv2d(&args, schedule)?;
            let expect = oracle_conv2d(&x, &w, outputs, geo, &groups, &low, &ash, &wsh, mode);
            let int8 = (max4 == 0).then(|| {
                let none = vec![false; groups.len()];
                oracle_conv2d(&x, &w, outputs, geo, &groups, &none, &ash, &wsh, mode)
            });
            let shape = format!(
                "{}x{}x{}->{} k{}x{} s{} p{}",
                geo.channels, geo.height, geo.width, outputs, geo.kernel_h, geo.kernel_w, geo.stride, geo.padding
            );
            ("conv2d", shape, got.acc, expect, int8)
        } else {
            let rows = rng.random_range(1..=64);
            let outputs = rng.random_range(1..=64);
            let features = rng.random_range(1..=64);
            let groups = default_groups(features, group_size);
            let x = codes(&mut rng, rows * features);
            let w = codes(&mut rng, outputs * features);
            let (ash, wsh) = shifts(&mut rng, groups.len(), outputs);
            let (max4, low) = prefix(&groups, ratio);
            let nib = lower_weights(&w, outputs, 1, &groups, &wsh);
            let args = MixedGemmArgs {
                x: &x,
                rows,
                w: &w,
                outputs,
                features,
                groups: &groups,
                max_4bit_ch: max4,
                act_shift: &ash,
                w_shift: &wsh,
                mode,
                nibbles: if cached { WeightNibbles::Cached(&nib) } else { WeightNibbles::OnTheFly },
            };
            let got = mixed_gemm(&args, schedule)?;
            let expect = oracle_gemm(&x, rows, &w, outputs, features, &groups, &low, &ash, &wsh, mode);
            let int8 = (max4 == 0).then(|| {
                let none = vec![false; groups.len()];
                oracle_gemm(&x, rows, &w, outputs, features, &groups, &none, &ash, &wsh, mode)
            });
            ("gemm", format!("{rows}x{features}x{outputs}"), got.acc, expect, int8)
        };
        let mismatches = got.iter().zip(&expect).filter(|(g, e)| i64::from(**g) != **e).count()
            + got.len().abs_diff(expect.len());
        let int8_identical = int8.map(|i| got.iter().map(|&g| i64::from(g)).eq(i.into_iter()));
        out.push(CaseResult {
            case,
            kernel: kernel.to_string(),
            shape,
            group_size,
            ratio,
            mode,
            cached_nibbles: cached,
            mismatches,
            int8_identical,
        });
    }
    Ok(out)
}

pub fn sweep_csv(results: &[CaseResult]) -> String {
    let mut s = String::from("case,kernel,shape,group_size,ratio,mode,cached_nibbles,mismatches,result\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.case,
            r.kernel,
            r.shape,
            r.group_size,
            r.ratio,
            match r.mode {
                ExtractionMode::Static => "static",
                ExtractionMode::Dynamic => "dynamic",
            },
            r.cached_nibbles,
            r.mismatches,
            if r.pass() { "pass" } else { "FAIL" }
        ));
    }
    s
}
