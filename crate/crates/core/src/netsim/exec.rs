use crate::bitlower::ExtractionMode;
use crate::error::{Error, Result};
use crate::kernels::{
    combine, mixed_conv2d_flags, mixed_gemm_flags, prefix_flags, MixedConvArgs, MixedGemmArgs,
    WeightNibbles,
};
use crate::netsim::graph::{same_ratio, MatmulLayer, NetworkGraph, Op};
use crate::par::Schedule;
use crate::qtensor::{quantize_scalar, Axes, Bitwidth, FloatTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrecisionMode {
    Fp32,
    Int8,
    /// Mixed 4/8-bit at a prepared 4-bit ratio.
    Mixed(f64),
    /// Mixed at the network's active ratio (see `layout::set_ratio`); 0 when unset.
    Active,
}

/// Low-bit group flags for every matmul layer, in matmul node order.
pub type Assignment = Vec<Vec<bool>>;

/// How a matmul layer computes.
#[derive(Debug, Clone, Copy)]
pub enum Compute<'a> {
    Float,
    /// Integer kernels with these low-bit group flags.
    Quantized {
        low: &'a [bool],
        mode: ExtractionMode,
    },
}

/// Observed data of one matmul layer during a run.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub node: usize,
    pub input: FloatTensor,
    pub output: FloatTensor,
    /// Channels whose 4-bit extraction clipped (quantized runs only).
    pub saturated: Vec<bool>,
}

/// Runs a validated network. Construction checks shapes once.
#[derive(Debug)]
pub struct Executor<'a> {
    net: &'a NetworkGraph,
    shapes: Vec<Vec<usize>>,
    matmuls: Vec<usize>,
}

impl<'a> Executor<'a> {
    pub fn new(net: &'a NetworkGraph) -> Result<Self> {
        let shapes = net.value_shapes()?;
        Ok(Executor {
            net,
            shapes,
            matmuls: net.matmul_nodes(),
        })
    }

    pub fn net(&self) -> &NetworkGraph {
        self.net
    }

    pub fn value_shape(&self, value: usize) -> &[usize] {
        &self.shapes[value]
    }

    /// All-8-bit assignment.
    pub fn int8_assignment(&self) -> Assignment {
        self.matmuls
            .iter()
            .map(|&n| vec![false; self.net.matmul(n).map_or(0, |m| m.groups.len())])
            .collect()
    }

    /// Assignment for a selection over selectable layers (flags in current order).
    pub fn assignment_from_selectable(&self, flags: &[Vec<bool>]) -> Result<Assignment> {
        let selectable = self.net.selectable_nodes();
        if flags.len() != selectable.len() {
            return Err(Error::InvalidConfig(format!(
                "{} flag vectors for {} selectable layers",
                flags.len(),
                selectable.len()
            )));
        }
        let mut out = self.int8_assignment();
        for (f, node) in flags.iter().zip(&selectable) {
            let k = self.matmuls.iter().position(|m| m == node).expect("selectable is matmul");
            if f.len() != out[k].len() {
                return Err(Error::InvalidConfig(format!(
                    "layer {} has {} groups, flags have {}",
                    self.net.nodes[*node].name,
                    out[k].len(),
                    f.len()
                )));
            }
            out[k] = f.clone();
        }
        Ok(out)
    }

    /// Resolves a precision mode to per-layer flags (`None` for fp32).
    pub fn resolve(&self, mode: PrecisionMode) -> Result<Option<Assignment>> {
        match mode {
            PrecisionMode::Fp32 => Ok(None),
            PrecisionMode::Active => self.resolve(PrecisionMode::Mixed(self.net.active_ratio.unwrap_or(0.0))),
            PrecisionMode::Int8 => {
                self.require_quant()?;
                Ok(Some(self.int8_assignment()))
            }
            PrecisionMode::Mixed(ratio) => {
                self.require_quant()?;
                if self.net.is_laid_out() {
                    let b = self
                        .net
                        .boundaries
                        .iter()
                        .find(|b| same_ratio(b.ratio, ratio));
                    match b {
                        Some(b) => self
                            .matmuls
                            .iter()
                            .zip(&b.max_4bit_ch)
                            .map(|(&n, &max4)| {
                                let m = self.net.matmul(n).expect("matmul");
                                prefix_flags(&m.groups, max4, &self.net.nodes[n].name)
                            })
                            .collect::<Result<Vec<_>>>()
                            .map(Some),
                        None if ratio == 0.0 => Ok(Some(self.int8_assignment())),
                        None => Err(Error::UnpreparedRatio {
                            requested: ratio,
                            available: self.net.prepared_ratios(),
                        }),
                    }
                } else {
                    match self.net.selections.iter().find(|s| same_ratio(s.ratio, ratio)) {
                        Some(s) => self.assignment_from_selectable(&s.flags).map(Some),
                        None if ratio == 0.0 => Ok(Some(self.int8_assignment())),
                        None => Err(Error::UnpreparedRatio {
                            requested: ratio,
                            available: self.net.prepared_ratios(),
                        }),
                    }
                }
            }
        }
    }

    fn require_quant(&self) -> Result<()> {
        if self.net.is_quantized() {
            Ok(())
        } else {
            Err(Error::NotPrepared("integer inference (run calibrate first)"))
        }
    }

    pub fn extraction_mode(&self) -> ExtractionMode {
        self.net.quant.map(|q| q.mode).unwrap_or_default()
    }

    pub fn run_mode(&self, input: &FloatTensor, mode: PrecisionMode) -> Result<FloatTensor> {
        let assignment = self.resolve(mode)?;
        self.run(input, assignment.as_ref(), None, None)
    }

    /// Forward pass. `assignment = None` runs in fp32. `mode` overrides the
    /// network's extraction mode. `probe` collects per-matmul observations.
    pub fn run(
        &self,
        input: &FloatTensor,
        assignment: Option<&Assignment>,
        mode: Option<ExtractionMode>,
        probe: Option<&mut Vec<LayerProbe>>,
    ) -> Result<FloatTensor> {
        if input.shape() != self.net.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                shape: self.net.input_shape.clone(),
                expected: self.net.input_shape.iter().product(),
                actual: input.len(),
            });
        }
        let mut values: Vec<FloatTensor> = Vec::with_capacity(self.net.nodes.len() + 1);
        values.push(match &self.net.input_order {
            Some(order) => gather_channels(input, order),
            None => input.clone(),
        });
        self.forward(&mut values, self.net.nodes.len(), assignment, mode, probe)?;
        Ok(values.pop().expect("at least the input value"))
    }

    /// Values `0..=stop` of a run (input plus outputs of the first `stop` nodes).
    pub fn run_prefix(
        &self,
        input: &FloatTensor,
        stop: usize,
        assignment: Option<&Assignment>,
        mode: Option<ExtractionMode>,
    ) -> Result<Vec<FloatTensor>> {
        let mut values = vec![match &self.net.input_order {
            Some(order) => gather_channels(input, order),
            None => input.clone(),
        }];
        self.forward(&mut values, stop.min(self.net.nodes.len()), assignment, mode, None)?;
        Ok(values)
    }

    /// Continues a run from the values produced by [`Executor::run_prefix`].
    pub fn resume(
        &self,
        prefix: &[FloatTensor],
        assignment: Option<&Assignment>,
        mode: Option<ExtractionMode>,
    ) -> Result<FloatTensor> {
        let mut values = Vec::with_capacity(self.net.nodes.len() + 1);
        values.extend_from_slice(prefix);
        self.forward(&mut values, self.net.nodes.len(), assignment, mode, None)?;
        Ok(values.pop().expect("at least the input value"))
    }

    fn forward(
        &self,
        values: &mut Vec<FloatTensor>,
        stop: usize,
        assignment: Option<&Assignment>,
        mode: Option<ExtractionMode>,
        mut probe: Option<&mut Vec<LayerProbe>>,
    ) -> Result<()> {
        if let Some(a) = assignment {
            if a.len() != self.matmuls.len() {
                return Err(Error::InvalidConfig("assignment does not cover every matmul layer".into()));
            }
        }
        let mode = mode.unwrap_or_else(|| self.extraction_mode());
        let start = values.len() - 1;
        let mut mm_index = self.matmuls.iter().filter(|&&n| n < start).count();
        for (i, node) in self.net.nodes.iter().enumerate().take(stop).skip(start) {
            let x = &values[node.input];
            let y = match &node.op {
                Op::Matmul(m) => {
                    let compute = match assignment {
                        None => Compute::Float,
                        Some(a) => Compute::Quantized { low: &a[mm_index], mode },
                    };
                    mm_index += 1;
                    let (y, saturated) = matmul_forward(m, x, compute)?;
                    if let Some(p) = probe.as_deref_mut() {
                        p.push(LayerProbe {
                            node: i,
                            input: x.clone(),
                            output: y.clone(),
                            saturated,
                        });
                    }
                    y
                }
                Op::Relu => map(x, |v| v.max(0.0)),
                Op::Gelu => map(x, gelu),
                Op::GlobalAvgPool => global_avg_pool(x),
                Op::Add { skip } => {
                    let s = &values[*skip];
                    let data = x.data().iter().zip(s.data()).map(|(a, b)| a + b).collect();
                    FloatTensor::from_parts(x.shape().to_vec(), data, x.axes())
                }
                Op::Reorder { gather } => gather_channels(x, gather),
            };
            debug_assert_eq!(y.shape(), self.shapes[i + 1].as_slice());
            values.push(y);
        }
        Ok(())
    }

    /// Runs a batch of samples; results are in input order for any schedule.
    pub fn run_batch(
        &self,
        inputs: &[FloatTensor],
        mode: PrecisionMode,
        schedule: Schedule,
    ) -> Result<Vec<FloatTensor>> {
        let assignment = self.resolve(mode)?;
        self.run_batch_assigned(inputs, assignment.as_ref(), None, schedule)
    }

    pub fn run_batch_assigned(
        &self,
        inputs: &[FloatTensor],
        assignment: Option<&Assignment>,
        mode: Option<ExtractionMode>,
        schedule: Schedule,
    ) -> Result<Vec<FloatTensor>> {
        schedule
            .map(inputs, |x| self.run(x, assignment, mode, None))
            .into_iter()
            .collect()
    }
}

pub fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

fn map(x: &FloatTensor, f: impl Fn(f32) -> f32) -> FloatTensor {
    FloatTensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect(), x.axes())
}

fn global_avg_pool(x: &FloatTensor) -> FloatTensor {
    let s = x.shape();
    let hw = s[1] * s[2];
    let data = x
        .data()
        .chunks(hw)
        .map(|c| c.iter().sum::<f32>() / hw as f32)
        .collect();
    FloatTensor::from_parts(vec![s[0]], data, Axes::activation())
}

/// Output channel `k` takes input channel `gather[k]`.
pub fn gather_channels(x: &FloatTensor, gather: &[usize]) -> FloatTensor {
    let inner: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(x.len());
    for &c in gather {
        data.extend_from_slice(&x.data()[c * inner..(c + 1) * inner]);
    }
    FloatTensor::from_parts(x.shape().to_vec(), data, x.axes())
}

/// Channel -> group index lookup for a layer's current groups.
fn channel_groups(m: &MatmulLayer) -> Vec<usize> {
    let mut out = vec![0; m.features()];
    for (gi, g) in m.groups.iter().enumerate() {
        out[g.span()].iter_mut().for_each(|v| *v = gi);
    }
    out
}

/// Quantizes a layer input to 8-bit codes with its activation scales.
pub fn quantize_input(m: &MatmulLayer, x: &FloatTensor) -> Result<Vec<i8>> {
    let q = m.quant.as_ref().ok_or(Error::NotPrepared("integer inference (run calibrate first)"))?;
    let inner: usize = x.shape()[1..].iter().product();
    let cg = channel_groups(m);
    Ok(x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| quantize_scalar(v, q.act_scales.for_group(cg[i / inner]), Bitwidth::Eight) as i8)
        .collect())
}

/// One matmul layer. Float accumulation follows original group order so
/// that laid-out layers reproduce the original results bit for bit.
pub fn matmul_forward(
    m: &MatmulLayer,
    x: &FloatTensor,
    compute: Compute<'_>,
) -> Result<(FloatTensor, Vec<bool>)> {
    let in_shape = x.shape();
    let geo = m.geometry(in_shape);
    let outputs = m.outputs();
    let (out_shape, positions) = match geo {
        None => (vec![outputs], 1),
        Some(g) => {
            let (oh, ow) = g.out_hw();
            (vec![outputs, oh, ow], oh * ow)
        }
    };
    match compute {
        Compute::Float => {
            let data = match geo {
                None => linear_f32(m, x.data()),
                Some(g) => conv_f32(m, x.data(), g),
            };
            Ok((FloatTensor::from_parts(out_shape, data, Axes::activation()), Vec::new()))
        }
        Compute::Quantized { low, mode } => {
            let q = m.quant.as_ref().ok_or(Error::NotPrepared("integer inference (run calibrate first)"))?;
            let codes = quantize_input(m, x)?;
            let acc = match geo {
                None => mixed_gemm_flags(
                    &MixedGemmArgs {
                        x: &codes,
                        rows: 1,
                        w: &q.weight_codes,
                        outputs,
                        features: m.features(),
                        groups: &m.groups,
                        max_4bit_ch: 0,
                        act_shift: &q.shifts.act,
                        w_shift: &q.shifts.weight,
                        mode,
                        nibbles: WeightNibbles::Cached(&q.nibbles),
                    },
                    low,
                    Schedule::Sequential,
                )?,
                Some(g) => mixed_conv2d_flags(
                    &MixedConvArgs {
                        x: &codes,
                        w: &q.weight_codes,
                        outputs,
                        geometry: g,
                        groups: &m.groups,
                        max_4bit_ch: 0,
                        act_shift: &q.shifts.act,
                        w_shift: &q.shifts.weight,
                        mode,
                        nibbles: WeightNibbles::Cached(&q.nibbles),
                    },
                    low,
                    Schedule::Sequential,
                )?,
            };
            let order = m.origin_order();
            let mut data = vec![0.0f32; outputs * positions];
            for o in 0..outputs {
                for p in 0..positions {
                    data[o * positions + p] =
                        combine(acc.group_slice(p, o), &m.groups, order, &q.act_scales, q.weight_scales[o])
                            + m.bias[o];
                }
            }
            let saturated = acc.saturated.into_iter().fold(vec![false; m.features()], |mut a, s| {
                a.iter_mut().zip(s).for_each(|(a, s)| *a |= s);
                a
            });
            Ok((FloatTensor::from_parts(out_shape, data, Axes::activation()), saturated))
        }
    }
}

fn linear_f32(m: &MatmulLayer, x: &[f32]) -> Vec<f32> {
    let f = m.features();
    let w = m.weight.data();
    (0..m.outputs())
        .map(|o| {
            let row = &w[o * f..(o + 1) * f];
            let mut acc = 0.0f32;
            for &gi in m.origin_order() {
                for c in m.groups[gi].span() {
                    acc += row[c] * x[c];
                }
            }
            acc + m.bias[o]
        })
        .collect()
}

fn conv_f32(m: &MatmulLayer, x: &[f32], g: crate::kernels::ConvGeometry) -> Vec<f32> {
    let (oh, ow) = g.out_hw();
    let taps = g.taps();
    let row_len = g.channels * taps;
    let w = m.weight.data();
    let mut out = vec![0.0f32; m.outputs() * oh * ow];
    for o in 0..m.outputs() {
        let wrow = &w[o * row_len..(o + 1) * row_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for &gi in m.origin_order() {
                    for c in m.groups[gi].span() {
                        for ky in 0..g.kernel_h {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            for kx in 0..g.kernel_w {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                acc += wrow[c * taps + ky * g.kernel_w + kx]
                                    * x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc + m.bias[o];
            }
        }
    }
    out
}
