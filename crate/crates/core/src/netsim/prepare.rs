use crate::bitlower::{plan_extraction, LayerCodeRanges};
use crate::error::{Error, Result};
use crate::kernels::ActScales;
use crate::netsim::exec::{Executor, LayerProbe};
use crate::netsim::graph::{LayerQuant, MatmulLayer, NetworkGraph, QuantConfig};
use crate::par::Schedule;
use crate::qtensor::{
    calibrate_ranges, quantize, quantize_scalar, weight_params, Axes, Bitwidth, CalibrationConfig, ChannelRange,
    FloatTensor, ScaleGranularity,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareConfig {
    pub calibration: CalibrationConfig,
    pub quant: QuantConfig,
    /// Samples per calibration batch (one EMA step per batch).
    pub batch_size: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            calibration: CalibrationConfig::default(),
            quant: QuantConfig::default(),
            batch_size: 32,
        }
    }
}

/// Stacks per-sample tensors into `[batch, ...]` with the feature axis at 1.
fn stack(samples: &[&FloatTensor]) -> FloatTensor {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].shape());
    let data = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    FloatTensor::from_parts(shape, data, Axes { feature: Some(1), output: None })
}

/// Calibrated float ranges of every matmul layer input, in matmul order.
pub fn calibrate_layer_inputs(
    net: &NetworkGraph,
    samples: &[FloatTensor],
    cfg: &PrepareConfig,
    schedule: Schedule,
) -> Result<Vec<ChannelRange>> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let exec = Executor::new(net)?;
    let probes: Vec<Vec<LayerProbe>> = schedule
        .map(samples, |x| {
            let mut p = Vec::new();
            exec.run(x, None, None, Some(&mut p)).map(|_| p)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let layers = net.matmul_nodes().len();
    let bs = cfg.batch_size.max(1);
    (0..layers)
        .map(|k| {
            let batches: Vec<FloatTensor> = probes
                .chunks(bs)
                .map(|chunk| stack(&chunk.iter().map(|p| &p[k].input).collect::<Vec<_>>()))
                .collect();
            calibrate_ranges(&batches, 1, cfg.calibration)
        })
        .collect()
}

/// Calibrates activation ranges, quantizes weights channel-wise and plans
/// static extraction shifts for every matmul layer.
pub fn prepare_network(
    net: &NetworkGraph,
    samples: &[FloatTensor],
    cfg: &PrepareConfig,
    schedule: Schedule,
) -> Result<NetworkGraph> {
    if net.is_laid_out() || net.count_reorders() > 0 {
        return Err(Error::InvalidConfig("calibrate before applying a layout".into()));
    }
    let ranges = calibrate_layer_inputs(net, samples, cfg, schedule)?;
    let mut out = net.clone();
    let mm = out.matmul_nodes();
    let mut code_ranges = Vec::with_capacity(mm.len());
    for (&n, range) in mm.iter().zip(ranges) {
        let name = out.nodes[n].name.clone();
        let m = out.matmul_mut(n).expect("matmul");
        let act_scales = match cfg.quant.act_granularity {
            ScaleGranularity::PerTensor => {
                let abs = range.abs_max(0..range.channels());
                ActScales::PerTensor(symmetric_scale(abs))
            }
            ScaleGranularity::PerGroup(_) | ScaleGranularity::PerChannel => {
                ActScales::PerGroup(m.groups.iter().map(|g| symmetric_scale(range.abs_max(g.span()))).collect())
            }
        };
        let wp = weight_params(&m.weight, Bitwidth::Eight)?;
        let wq = quantize(&m.weight, &wp)?;
        let weight_codes = wq.data().to_vec();

        m.quant = Some(LayerQuant {
            act_range: range,
            act_scales,
            weight_codes,
            weight_scales: wp.scales,
            shifts: crate::bitlower::LayerShifts::naive("", 0, 0),
            nibbles: Vec::new(),
        });
        code_ranges.push(layer_code_ranges(m, &name)?);
    }
    let plan = plan_extraction(&code_ranges, out.group_size, cfg.quant.mode)?;
    out.quant = Some(cfg.quant);
    out.selections.clear();
    out.active_ratio = None;
    out.set_extraction_plan(&plan)?;
    Ok(out)
}

/// Integer code ranges of a quantized layer: activation ranges from the
/// calibrated float range, weight ranges from the codes over kernel taps.
pub fn layer_code_ranges(m: &MatmulLayer, name: &str) -> Result<LayerCodeRanges> {
    let q = m.quant.as_ref().ok_or(Error::NotPrepared("code ranges (run calibrate first)"))?;
    let features = m.features();
    let taps = m.taps();
    let mut act = vec![(0, 0); features];
    for (gi, g) in m.groups.iter().enumerate() {
        let s = q.act_scales.for_group(gi);
        for c in g.span() {
            act[c] = (
                quantize_scalar(q.act_range.min[c], s, Bitwidth::Eight),
                quantize_scalar(q.act_range.max[c], s, Bitwidth::Eight),
            );
        }
    }
    let weight = (0..m.outputs())
        .map(|o| {
            (0..features)
                .map(|c| {
                    let codes = &q.weight_codes[(o * features + c) * taps..(o * features + c + 1) * taps];
                    codes
                        .iter()
                        .fold((0i32, 0i32), |(lo, hi), &v| (lo.min(i32::from(v)), hi.max(i32::from(v))))
                })
                .collect()
        })
        .collect();
    Ok(LayerCodeRanges {
        layer: name.to_string(),
        features,
        act,
        weight,
    })
}

pub(crate) fn symmetric_scale(abs: f32) -> f32 {
    symmetric_scale_for(abs, Bitwidth::Eight)
}

/// `absmax / qmax`, or the degenerate-range scale for an all-zero range.
pub fn symmetric_scale_for(abs: f32, bw: Bitwidth) -> f32 {
    if abs > 0.0 {
        abs / bw.q_max() as f32
    } else {
        crate::qtensor::EPSILON_SCALE
    }
}
