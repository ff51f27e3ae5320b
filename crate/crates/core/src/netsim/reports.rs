//! Per-layer analyses: unused bits, saturated channels under a fixed
//! extraction plan, and single-layer output distance to 8-bit.

use serde::{Deserialize, Serialize};

use crate::bitlower::{range_bitwidth, ExtractionPlan, LayerCodeRanges};
use crate::error::{Error, Result};
use crate::netsim::exec::{matmul_forward, Compute, Executor, LayerProbe};
use crate::netsim::graph::{MatmulLayer, NetworkGraph};
use crate::netsim::metrics::l2_distance;
use crate::netsim::prepare::layer_code_ranges;
use crate::par::Schedule;
use crate::qtensor::{quantize_scalar, Bitwidth, FloatTensor};
use crate::scoring::layer_group_scores;

/// Channel counts with 0, 1, 2, 3 and 4 (or more) unused high bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnusedBitRow {
    pub layer: String,
    /// "activation" or "weight".
    pub tensor: String,
    pub counts: [usize; 5],
}

impl UnusedBitRow {
    pub fn percent(&self) -> [f64; 5] {
        let total: usize = self.counts.iter().sum();
        self.counts.map(|c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
    }
}

fn histogram(widths: impl Iterator<Item = (i32, i32)>) -> [usize; 5] {
    let mut counts = [0; 5];
    for (lo, hi) in widths {
        let unused = range_bitwidth(lo, hi).unused_bits().min(4);
        counts[usize::from(unused)] += 1;
    }
    counts
}

/// Histograms for one layer. A weight feature channel spans every output
/// channel and kernel tap.
pub fn unused_bits_of(ranges: &LayerCodeRanges) -> [UnusedBitRow; 2] {
    let act = histogram(ranges.act.iter().copied());
    let weight = histogram((0..ranges.features).map(|c| {
        ranges
            .weight
            .iter()
            .fold((0, 0), |(lo, hi), row| (lo.min(row[c].0), hi.max(row[c].1)))
    }));
    [
        UnusedBitRow {
            layer: ranges.layer.clone(),
            tensor: "activation".into(),
            counts: act,
        },
        UnusedBitRow {
            layer: ranges.layer.clone(),
            tensor: "weight".into(),
            counts: weight,
        },
    ]
}

/// Unused-bit histograms of every matmul layer of a calibrated network.
pub fn unused_bit_report(net: &NetworkGraph) -> Result<Vec<UnusedBitRow>> {
    if !net.is_quantized() {
        return Err(Error::NotPrepared("unused-bit report (run calibrate first)"));
    }
    let mut rows = Vec::new();
    for n in net.matmul_nodes() {
        let m = net.matmul(n).expect("matmul");
        rows.extend(unused_bits_of(&layer_code_ranges(m, &net.nodes[n].name)?));
    }
    Ok(rows)
}

pub fn unused_bits_csv(rows: &[UnusedBitRow]) -> String {
    let mut s = String::from("layer,tensor,unused_0,unused_1,unused_2,unused_3,unused_4\n");
    for r in rows {
        let p = r.percent();
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.layer, r.tensor, p[0], p[1], p[2], p[3], p[4]));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub layer: String,
    pub channels: usize,
    pub saturated: usize,
}

impl SaturationRow {
    pub fn percent(&self) -> f64 {
        if self.channels == 0 {
            0.0
        } else {
            100.0 * self.saturated as f64 / self.channels as f64
        }
    }
}

/// Runs every matmul layer fully in 4 bits under `plan` and counts input
/// channels that clipped for at least one of `inputs`.
pub fn saturation_report(
    net: &NetworkGraph,
    inputs: &[FloatTensor],
    plan: &ExtractionPlan,
    schedule: Schedule,
) -> Result<Vec<SaturationRow>> {
    if inputs.is_empty() {
        return Err(Error::InvalidParams("saturation report needs at least one input".into()));
    }
    let mut planned = net.clone();
    planned.set_extraction_plan(plan)?;
    let exec = Executor::new(&planned)?;
    if !planned.is_quantized() {
        return Err(Error::NotPrepared("saturation report (run calibrate first)"));
    }
    let all_low: Vec<Vec<bool>> = exec.int8_assignment().into_iter().map(|a| vec![true; a.len()]).collect();
    let probes: Vec<Vec<LayerProbe>> = schedule
        .map(inputs, |x| {
            let mut p = Vec::new();
            exec.run(x, Some(&all_low), Some(plan.mode), Some(&mut p)).map(|_| p)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mm = planned.matmul_nodes();
    Ok(mm
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let features = planned.matmul(n).expect("matmul").features();
            let mut sat = vec![false; features];
            for p in &probes {
                sat.iter_mut().zip(&p[k].saturated).for_each(|(a, &b)| *a |= b);
            }
            SaturationRow {
                layer: planned.nodes[n].name.clone(),
                channels: features,
                saturated: sat.iter().filter(|&&s| s).count(),
            }
        })
        .collect())
}

pub fn saturation_csv(rows: &[SaturationRow]) -> String {
    let mut s = String::from("layer,channels,saturated,saturated_percent\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.layer, r.channels, r.saturated, r.percent()));
    }
    s
}

/// Ratios of the single-layer distance analysis.
pub const L2_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Row {
    pub layer: String,
    /// Normalised distance to the 8-bit output at each of [`L2_RATIOS`].
    pub mixed: Vec<f64>,
    pub uniform_int4: f64,
}

/// The layer computed with plain 4-bit quantization: activation scale
/// `absmax / 7` from the calibrated range, weight scales per output channel.
pub fn uniform_int4_forward(m: &MatmulLayer, x: &FloatTensor) -> Result<FloatTensor> {
    let q = m.quant.as_ref().ok_or(Error::NotPrepared("uniform 4-bit (run calibrate first)"))?;
    let four = Bitwidth::Four;
    let abs = q.act_range.abs_max(0..q.act_range.channels());
    let sx = crate::netsim::prepare::symmetric_scale_for(abs, four);
    let (f, taps) = (m.features(), m.taps());
    let w = m.weight.data();
    let mut deq_w = vec![0.0f32; w.len()];
    for o in 0..m.outputs() {
        let row = &w[o * f * taps..(o + 1) * f * taps];
        let sw = crate::netsim::prepare::symmetric_scale_for(row.iter().fold(0.0f32, |a, &v| a.max(v.abs())), four);
        for (d, &v) in deq_w[o * f * taps..(o + 1) * f * taps].iter_mut().zip(row) {
            *d = quantize_scalar(v, sw, four) as f32 * sw;
        }
    }
    let deq_x: Vec<f32> = x.data().iter().map(|&v| quantize_scalar(v, sx, four) as f32 * sx).collect();
    let mut layer = m.clone();
    layer.weight = FloatTensor::from_parts(m.weight.shape().to_vec(), deq_w, m.weight.axes());
    layer.quant = None;
    let xq = FloatTensor::from_parts(x.shape().to_vec(), deq_x, x.axes());
    Ok(matmul_forward(&layer, &xq, Compute::Float)?.0)
}

/// Lowest-score groups of one layer at `ratio` (rounded to whole groups).
pub fn layer_greedy_flags(m: &MatmulLayer, ratio: f64) -> Result<Vec<bool>> {
    let q = m.quant.as_ref().ok_or(Error::NotPrepared("layer scores (run calibrate first)"))?;
    let scores = layer_group_scores(m, &q.act_range);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let take = (ratio * scores.len() as f64).round() as usize;
    let mut flags = vec![false; scores.len()];
    for &g in order.iter().take(take) {
        flags[g] = true;
    }
    Ok(flags)
}

/// Each matmul layer in isolation, fed by the fp32 network: distance of the
/// mixed output (lowest-score groups in 4 bits) and of a uniform 4-bit
/// layer from the 8-bit output, normalised by the 8-bit output norm.
pub fn l2_report(net: &NetworkGraph, inputs: &[FloatTensor], schedule: Schedule) -> Result<Vec<L2Row>> {
    if !net.is_quantized() {
        return Err(Error::NotPrepared("L2 report (run calibrate first)"));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidParams("L2 report needs at least one input".into()));
    }
    let exec = Executor::new(net)?;
    let mode = exec.extraction_mode();
    let probes: Vec<Vec<LayerProbe>> = schedule
        .map(inputs, |x| {
            let mut p = Vec::new();
            exec.run(x, None, None, Some(&mut p)).map(|_| p)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mm = net.matmul_nodes();
    let mut rows = Vec::with_capacity(mm.len());
    for (k, &n) in mm.iter().enumerate() {
        let m = net.matmul(n).expect("matmul");
        let flags: Vec<Vec<bool>> = L2_RATIOS.iter().map(|&r| layer_greedy_flags(m, r)).collect::<Result<_>>()?;
        let int8 = vec![false; m.groups.len()];
        let per_sample: Vec<(Vec<f32>, Vec<Vec<f32>>, Vec<f32>)> = schedule
            .map(&probes, |p| {
                let x = &p[k].input;
                let reference = matmul_forward(m, x, Compute::Quantized { low: &int8, mode })?.0.into_data();
                let mixed = flags
                    .iter()
                    .map(|f| matmul_forward(m, x, Compute::Quantized { low: f, mode }).map(|r| r.0.into_data()))
                    .collect::<Result<Vec<_>>>()?;
                let uni = uniform_int4_forward(m, x)?.into_data();
                Ok((reference, mixed, uni))
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let reference: Vec<f32> = per_sample.iter().flat_map(|s| s.0.iter().copied()).collect();
        let norm = l2_distance(&reference, &vec![0.0; reference.len()])?;
        if norm == 0.0 {
            return Err(Error::InvalidParams(format!("8-bit output of {} is all zero", net.nodes[n].name)));
        }
        let mixed = (0..L2_RATIOS.len())
            .map(|r| {
                let v: Vec<f32> = per_sample.iter().flat_map(|s| s.1[r].iter().copied()).collect();
                l2_distance(&v, &reference).map(|d| d / norm)
            })
            .collect::<Result<Vec<_>>>()?;
        let uni: Vec<f32> = per_sample.iter().flat_map(|s| s.2.iter().copied()).collect();
        rows.push(L2Row {
            layer: net.nodes[n].name.clone(),
            mixed,
            uniform_int4: l2_distance(&uni, &reference)? / norm,
        });
    }
    Ok(rows)
}

pub fn l2_csv(rows: &[L2Row]) -> String {
    let mut s = String::from("layer,mixed_25,mixed_50,mixed_75,mixed_100,uniform_int4\n");
    for r in rows {
        s.push_str(&r.layer);
        for v in &r.mixed {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}\n", r.uniform_int4));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges(weight_hi: i32) -> LayerCodeRanges {
        LayerCodeRanges {
            layer: "fc".into(),
            features: 4,
            act: vec![(-128, 127), (0, 7), (-8, 7), (0, 0)],
            weight: vec![vec![(-weight_hi, weight_hi); 4]; 2],
        }
    }

    #[test]
    fn unused_bit_histograms() {
        let [act, w] = unused_bits_of(&ranges(127));
        assert_eq!(act.counts, [1, 0, 0, 0, 3]);
        assert_eq!(w.counts, [4, 0, 0, 0, 0]);
        assert_eq!(w.percent()[0], 100.0);
        // Codes a sixteenth of full range leave at least 3 bits unused.
        let [_, w] = unused_bits_of(&ranges(127 / 16));
        assert_eq!(w.counts[..3].iter().sum::<usize>(), 0);
    }
}
