//! Seeded synthetic networks and classification sets.
//!
//! Inputs come from a Gaussian mixture whose channels have log-uniform
//! scales; labels come from a planted linear teacher. Weight columns get
//! their own log-uniform scales so feature channels differ widely in range.
//! The classifier head is fit to the teacher by ridge regression on fp32
//! features, so the fp32 network reaches a meaningful accuracy.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::exec::{Executor, LayerProbe};
use crate::netsim::graph::{MatmulKind, MatmulLayer, NetworkGraph, Op};
use crate::qtensor::{Axes, FloatTensor};
use crate::rng::stage_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SynthArch {
    /// Linear stem, residual blocks of two linear layers, linear head.
    Mlp { input: usize, hidden: usize, blocks: usize },
    /// 3x3 conv stem, residual blocks of two 3x3 convs, pooling, linear head.
    Conv { input_channels: usize, channels: usize, size: usize, blocks: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub arch: SynthArch,
    pub classes: usize,
    pub group_size: usize,
    /// Decades spanned by the log-uniform per-channel scales.
    pub spread_decades: f32,
    pub residual: bool,
    pub calib_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn mlp(seed: u64) -> Self {
        SynthConfig {
            arch: SynthArch::Mlp { input: 64, hidden: 64, blocks: 2 },
            classes: 10,
            group_size: 8,
            spread_decades: 1.5,
            residual: true,
            calib_samples: 128,
            eval_samples: 256,
            seed,
        }
    }

    pub fn conv(seed: u64) -> Self {
        SynthConfig {
            arch: SynthArch::Conv { input_channels: 8, channels: 16, size: 6, blocks: 1 },
            classes: 6,
            group_size: 4,
            spread_decades: 1.5,
            residual: true,
            calib_samples: 64,
            eval_samples: 96,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthModel {
    pub net: NetworkGraph,
    pub calib: Vec<FloatTensor>,
    pub eval: Vec<FloatTensor>,
    pub eval_labels: Vec<usize>,
}

fn log_uniform(rng: &mut ChaCha8Rng, n: usize, decades: f32) -> Vec<f32> {
    (0..n)
        .map(|_| 10f32.powf(-rng.random_range(0.0..=decades.max(0.0))))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Weight `[out, in, taps]` with log-uniform scales on feature columns and
/// on output rows, so hidden activations also differ widely per channel.
fn weight(rng: &mut ChaCha8Rng, shape: Vec<usize>, decades: f32) -> FloatTensor {
    let (out, inp) = (shape[0], shape[1]);
    let taps: usize = shape[2..].iter().product();
    let col = log_uniform(rng, inp, decades);
    let row = log_uniform(rng, out, decades);
    let gain = (2.0 / (inp * taps) as f32).sqrt();
    let mut data = gaussian(rng, out * inp * taps, gain);
    for o in 0..out {
        for c in 0..inp {
            for t in 0..taps {
                data[(o * inp + c) * taps + t] *= col[c] * row[o];
            }
        }
    }
    FloatTensor::from_parts(shape, data, Axes::weight())
}

struct InputDist {
    shape: Vec<usize>,
    channel_scale: Vec<f32>,
    centers: Vec<Vec<f32>>,
}

impl InputDist {
    fn new(rng: &mut ChaCha8Rng, shape: Vec<usize>, decades: f32, components: usize) -> Self {
        let n: usize = shape.iter().product();
        let channel_scale = log_uniform(rng, shape[0], decades);
        let centers = (0..components).map(|_| gaussian(rng, n, 1.0)).collect();
        InputDist { shape, channel_scale, centers }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> FloatTensor {
        let n: usize = self.shape.iter().product();
        let inner = n / self.shape[0];
        let center = &self.centers[rng.random_range(0..self.centers.len())];
        let data = (0..n)
            .map(|i| {
                let z: f32 = StandardNormal.sample(rng);
                (center[i] + 0.5 * z) * self.channel_scale[i / inner]
            })
            .collect();
        FloatTensor::from_parts(self.shape.clone(), data, Axes::activation())
    }
}

fn teacher_label(teacher: &[Vec<f32>], x: &FloatTensor) -> usize {
    let logits: Vec<f32> = teacher
        .iter()
        .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum())
        .collect();
    crate::netsim::metrics::argmax(&logits)
}

/// Builds the network body (everything before the head) per architecture.
fn body(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(NetworkGraph, usize)> {
    let d = cfg.spread_decades;
    let gs = cfg.group_size;
    match cfg.arch {
        SynthArch::Mlp { input, hidden, blocks } => {
            let mut net = NetworkGraph::new(vec![input], gs);
            let lin = |rng: &mut ChaCha8Rng, o: usize, i: usize| -> Result<Op> {
                Ok(Op::Matmul(MatmulLayer::new(
                    MatmulKind::Linear,
                    weight(rng, vec![o, i], d),
                    gaussian(rng, o, 0.05),
                    gs,
                )?))
            };
            net.push("fc_in", lin(rng, hidden, input)?);
            let mut x = net.push("relu_in", Op::Relu);
            for b in 0..blocks {
                net.push(format!("block{b}.fc_a"), lin(rng, hidden, hidden)?);
                net.push(format!("block{b}.relu"), Op::Relu);
                let y = net.push(format!("block{b}.fc_b"), lin(rng, hidden, hidden)?);
                x = if cfg.residual {
                    net.push_from(format!("block{b}.add"), y, Op::Add { skip: x });
                    net.push(format!("block{b}.out"), Op::Gelu)
                } else {
                    net.push(format!("block{b}.out"), Op::Gelu)
                };
            }
            Ok((net, hidden))
        }
        SynthArch::Conv { input_channels, channels, size, blocks } => {
            let mut net = NetworkGraph::new(vec![input_channels, size, size], gs);
            let conv = |rng: &mut ChaCha8Rng, o: usize, i: usize| -> Result<Op> {
                Ok(Op::Matmul(MatmulLayer::new(
                    MatmulKind::Conv2d { kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 },
                    weight(rng, vec![o, i, 3, 3], d),
                    gaussian(rng, o, 0.05),
                    gs,
                )?))
            };
            net.push("conv_in", conv(rng, channels, input_channels)?);
            let mut x = net.push("relu_in", Op::Relu);
            for b in 0..blocks {
                net.push(format!("block{b}.conv_a"), conv(rng, channels, channels)?);
                net.push(format!("block{b}.relu"), Op::Relu);
                let y = net.push(format!("block{b}.conv_b"), conv(rng, channels, channels)?);
                x = if cfg.residual {
                    net.push_from(format!("block{b}.add"), y, Op::Add { skip: x });
                    net.push(format!("block{b}.out"), Op::Relu)
                } else {
                    net.push(format!("block{b}.out"), Op::Relu)
                };
            }
            net.push("pool", Op::GlobalAvgPool);
            Ok((net, channels))
        }
    }
}

/// Ridge fit of `features -> targets` with an intercept column.
fn ridge(features: &[Vec<f32>], targets: &[Vec<f32>], alpha: f64) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
    let n = features.len();
    let f = features[0].len();
    let k = targets[0].len();
    let mut x = DMatrix::<f64>::zeros(n, f + 1);
    let mut y = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        for j in 0..f {
            x[(i, j)] = f64::from(features[i][j]);
        }
        x[(i, f)] = 1.0;
        for j in 0..k {
            y[(i, j)] = f64::from(targets[i][j]);
        }
    }
    let xt = x.transpose();
    let mut gram = &xt * &x;
    let trace = (0..f).map(|j| gram[(j, j)]).sum::<f64>() / f.max(1) as f64;
    for j in 0..f {
        gram[(j, j)] += alpha * trace.max(1e-12);
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("ridge system is not positive definite".into()))?;
    let beta = chol.solve(&(&xt * &y));
    let w = (0..k).map(|c| (0..f).map(|j| beta[(j, c)] as f32).collect()).collect();
    let b = (0..k).map(|c| beta[(f, c)] as f32).collect();
    Ok((w, b))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthModel> {
    if cfg.classes < 2 || cfg.group_size == 0 {
        return Err(Error::InvalidConfig("need at least 2 classes and a positive group size".into()));
    }
    let mut rng = stage_rng(cfg.seed, "synth.weights");
    let (mut net, feat) = body(cfg, &mut rng)?;

    let mut drng = stage_rng(cfg.seed, "synth.data");
    let dist = InputDist::new(&mut drng, net.input_shape.clone(), cfg.spread_decades, cfg.classes * 2);
    let n_in: usize = net.input_shape.iter().product();
    let teacher: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|_| {
            let mut row = gaussian(&mut drng, n_in, 1.0);
            let inner = n_in / dist.shape[0];
            // Normalize by channel scale so small channels still matter.
            for (i, v) in row.iter_mut().enumerate() {
                *v /= dist.channel_scale[i / inner];
            }
            row
        })
        .collect();

    let train_n = (4 * feat).max(256);
    let train: Vec<FloatTensor> = (0..train_n).map(|_| dist.sample(&mut drng)).collect();
    let calib: Vec<FloatTensor> = (0..cfg.calib_samples).map(|_| dist.sample(&mut drng)).collect();
    let eval: Vec<FloatTensor> = (0..cfg.eval_samples).map(|_| dist.sample(&mut drng)).collect();
    let eval_labels = eval.iter().map(|x| teacher_label(&teacher, x)).collect();

    // Fit the head on fp32 features of the body.
    let exec = Executor::new(&net)?;
    let feats: Vec<Vec<f32>> = train
        .iter()
        .map(|x| exec.run(x, None, None, None).map(|y| y.into_data()))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f32>> = train
        .iter()
        .map(|x| {
            let mut onehot = vec![0.0f32; cfg.classes];
            onehot[teacher_label(&teacher, x)] = 1.0;
            onehot
        })
        .collect();
    let (w, b) = ridge(&feats, &targets, 1e-3)?;
    let data: Vec<f32> = w.into_iter().flatten().collect();
    let head = MatmulLayer::new(
        MatmulKind::Linear,
        FloatTensor::from_parts(vec![cfg.classes, feat], data, Axes::weight()),
        b,
        cfg.group_size,
    )?;
    net.push("head", Op::Matmul(head));
    net.validate()?;
    Ok(SynthModel { net, calib, eval, eval_labels })
}

/// Random small network for property checks: 2 to 6 matmul layers, linear
/// or 3x3-conv bodies, random activations and residual adds where widths
/// match. Returns the fp32 network and `samples` inputs drawn like the
/// synthetic presets.
pub fn random_net(seed: u64, layers: usize, samples: usize) -> Result<(NetworkGraph, Vec<FloatTensor>)> {
    if !(2..=6).contains(&layers) {
        return Err(Error::InvalidConfig(format!("random_net takes 2 to 6 layers, got {layers}")));
    }
    let mut rng = stage_rng(seed, "synth.random_net");
    let gs = [1usize, 2, 4][rng.random_range(0..3)];
    let width = gs * rng.random_range(2..=5);
    let input = gs * rng.random_range(2..=4);
    let classes = rng.random_range(3..=6);
    let decades = 1.5;
    let conv = rng.random_bool(0.3);
    let act = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { Op::Relu } else { Op::Gelu };

    let mut net = if conv {
        NetworkGraph::new(vec![input, 4, 4], gs)
    } else {
        NetworkGraph::new(vec![input], gs)
    };
    net.keep_ends_8bit = layers > 3 && rng.random_bool(0.5);
    let layer = |rng: &mut ChaCha8Rng, o: usize, i: usize, spatial: bool| -> Result<Op> {
        let (kind, shape) = if spatial {
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            (
                MatmulKind::Conv2d { kernel_h: k, kernel_w: k, stride: 1, padding: k / 2 },
                vec![o, i, k, k],
            )
        } else {
            (MatmulKind::Linear, vec![o, i])
        };
        Ok(Op::Matmul(MatmulLayer::new(kind, weight(rng, shape, decades), gaussian(rng, o, 0.05), gs)?))
    };

    net.push("l0", layer(&mut rng, width, input, conv)?);
    let mut x = net.push("l0.act", act(&mut rng));
    for l in 1..layers - 1 {
        let y = net.push(format!("l{l}"), layer(&mut rng, width, width, conv)?);
        let mut y = if rng.random_bool(0.5) { net.push(format!("l{l}.act"), act(&mut rng)) } else { y };
        if rng.random_bool(0.6) {
            y = net.push_from(format!("l{l}.add"), y, Op::Add { skip: x });
        }
        x = y;
    }
    if conv {
        net.push("pool", Op::GlobalAvgPool);
    }
    net.push(format!("l{}", layers - 1), layer(&mut rng, classes, width, false)?);
    net.validate()?;

    let dist = InputDist::new(&mut rng, net.input_shape.clone(), decades, 3);
    let data = (0..samples).map(|_| dist.sample(&mut rng)).collect();
    Ok((net, data))
}

/// Same samples with every value multiplied by `factor`.
pub fn scale_inputs(inputs: &[FloatTensor], factor: f32) -> Vec<FloatTensor> {
    inputs
        .iter()
        .map(|x| FloatTensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect(), x.axes()))
        .collect()
}

/// Fp32 logits of the eval set, for quick accuracy checks.
pub fn fp32_logits(net: &NetworkGraph, inputs: &[FloatTensor]) -> Result<Vec<Vec<f32>>> {
    let exec = Executor::new(net)?;
    inputs.iter().map(|x| exec.run(x, None, None, None).map(|y| y.into_data())).collect()
}

#[doc(hidden)]
pub fn probe(net: &NetworkGraph, x: &FloatTensor) -> Result<Vec<LayerProbe>> {
    let exec = Executor::new(net)?;
    let mut p = Vec::new();
    exec.run(x, None, None, Some(&mut p))?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::metrics::top1_accuracy;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SynthConfig::mlp(3)).unwrap();
        let b = generate(&SynthConfig::mlp(3)).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.eval, b.eval);
        let c = generate(&SynthConfig::mlp(4)).unwrap();
        assert_ne!(a.eval, c.eval);
    }

    #[test]
    fn head_learns_teacher() {
        let m = generate(&SynthConfig::mlp(1)).unwrap();
        let logits = fp32_logits(&m.net, &m.eval).unwrap();
        let acc = top1_accuracy(&logits, &m.eval_labels);
        assert!(acc > 0.4, "fp32 accuracy {acc}");

        let m = generate(&SynthConfig::conv(1)).unwrap();
        assert_eq!(m.net.matmul_nodes().len(), 4);
        let logits = fp32_logits(&m.net, &m.eval).unwrap();
        assert!(top1_accuracy(&logits, &m.eval_labels) > 1.0 / 6.0);
    }
}
