//! Fitness against an independent scalar re-implementation of the mixed
//! forward pass: graph walk, quantization, slice-and-shift dequantization of
//! every product, and the mean L2 distance.

use mixq::bitlower::ExtractionMode;
use mixq::evoselect::FitnessEval;
use mixq::kernels::{lower_weights, ActScales};
use mixq::netsim::exec::gelu;
use mixq::netsim::graph::{NetworkGraph, Op};
use mixq::netsim::synth::{generate, SynthConfig};
use mixq::netsim::{prepare_network, PrepareConfig, QuantConfig};
use mixq::qtensor::FloatTensor;
use mixq::Schedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q8(x: f32, s: f32) -> i64 {
    (x / s).round_ties_even().clamp(-128.0, 127.0) as i64
}

fn slice4(v: i64, p: u32) -> i64 {
    v.div_euclid(1 << p).clamp(-8, 7)
}

fn width(v: i64) -> u32 {
    (1..=8).find(|&b| v >= -(1 << (b - 1)) && v < (1 << (b - 1))).unwrap()
}

/// Logits with the selectable layers' groups flagged in `flags` run at 4 bits.
fn oracle_logits(net: &NetworkGraph, x: &FloatTensor, flags: &[Vec<bool>]) -> Vec<f32> {
    let selectable = net.selectable_nodes();
    let dynamic = net.quant.unwrap().mode == ExtractionMode::Dynamic;
    let mut values: Vec<Vec<f32>> = vec![x.data().to_vec()];
    for (i, node) in net.nodes.iter().enumerate() {
        let inp = &values[node.input];
        let out = match &node.op {
            Op::Matmul(m) => {
                let q = m.quant.as_ref().unwrap();
                let s = match q.act_scales {
                    ActScales::PerTensor(s) => s,
                    ActScales::PerGroup(_) => unreachable!("per-tensor scales only"),
                };
                let f = m.features();
                let xq: Vec<i64> = inp.iter().map(|&v| q8(v, s)).collect();
                let low: Vec<bool> = match selectable.iter().position(|&n| n == i) {
                    Some(l) => flags[l].clone(),
                    None => vec![false; m.groups.len()],
                };
                (0..m.outputs())
                    .map(|o| {
                        let mut total = 0i64;
                        for (g, grp) in m.groups.iter().enumerate() {
                            let span = grp.start..grp.start + grp.len;
                            let px = if dynamic {
                                span.clone().map(|c| width(xq[c])).max().unwrap().saturating_sub(4)
                            } else {
                                u32::from(q.shifts.act[g])
                            };
                            let pw = u32::from(q.shifts.weight[g][o]);
                            for c in span {
                                let a = xq[c];
                                let w = i64::from(q.weight_codes[o * f + c]);
                                total += if low[g] {
                                    (slice4(a, px) << px) * (slice4(w, pw) << pw)
                                } else {
                                    a * w
                                };
                            }
                        }
                        total as f32 * (s * q.weight_scales[o]) + m.bias[o]
                    })
                    .collect()
            }
            Op::Relu => inp.iter().map(|v| v.max(0.0)).collect(),
            Op::Gelu => inp.iter().map(|&v| gelu(v)).collect(),
            Op::Add { skip } => inp.iter().zip(&values[*skip]).map(|(a, b)| a + b).collect(),
            other => panic!("oracle does not cover {}", other.kind_name()),
        };
        values.push(out);
    }
    values.pop().unwrap()
}

fn oracle_fitness(net: &NetworkGraph, samples: &[FloatTensor], flags: &[Vec<bool>]) -> f64 {
    let none: Vec<Vec<bool>> = flags.iter().map(|l| vec![false; l.len()]).collect();
    let total: f64 = samples
        .iter()
        .map(|x| {
            let a = oracle_logits(net, x, flags);
            let b = oracle_logits(net, x, &none);
            a.iter().zip(&b).map(|(p, q)| (f64::from(*p) - f64::from(*q)).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    total / samples.len() as f64
}

fn prepared(seed: u64, mode: ExtractionMode) -> (NetworkGraph, Vec<FloatTensor>) {
    let m = generate(&SynthConfig::mlp(seed)).unwrap();
    let cfg = PrepareConfig { quant: QuantConfig { mode, ..QuantConfig::default() }, ..PrepareConfig::default() };
    let net = prepare_network(&m.net, &m.calib, &cfg, Schedule::Parallel).unwrap();
    (net, m.eval[..24].to_vec())
}

#[test]
fn full_low_fitness_matches_oracle() {
    for mode in [ExtractionMode::Static, ExtractionMode::Dynamic] {
        for seed in 0..3 {
            let (net, samples) = prepared(seed, mode);
            let eval = FitnessEval::new(&net, &samples, Schedule::Parallel).unwrap();
            let all: Vec<Vec<bool>> = eval.group_counts().iter().map(|&n| vec![true; n]).collect();
            let got = eval.fitness(&all, Schedule::Parallel).unwrap();
            let want = oracle_fitness(&net, &samples, &all);
            assert!(got > 0.0);
            assert!((got - want).abs() <= 1e-6, "{mode:?} seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn random_flags_match_oracle() {
    let (net, samples) = prepared(5, ExtractionMode::Static);
    let eval = FitnessEval::new(&net, &samples, Schedule::Parallel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let flags: Vec<Vec<bool>> =
            eval.group_counts().iter().map(|&n| (0..n).map(|_| rng.random_bool(0.5)).collect()).collect();
        let got = eval.fitness(&flags, Schedule::Sequential).unwrap();
        let want = oracle_fitness(&net, &samples, &flags);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn no_low_groups_is_exactly_zero() {
    let (net, samples) = prepared(1, ExtractionMode::Static);
    let eval = FitnessEval::new(&net, &samples, Schedule::Parallel).unwrap();
    let none: Vec<Vec<bool>> = eval.group_counts().iter().map(|&n| vec![false; n]).collect();
    assert_eq!(eval.fitness(&none, Schedule::Parallel).unwrap(), 0.0);
}

#[test]
fn narrow_codes_extract_losslessly() {
    // Shrink every code into 4 signed bits so extraction at shift 0 is exact.
    let (mut net, samples) = prepared(2, ExtractionMode::Static);
    for i in net.matmul_nodes() {
        let m = net.matmul_mut(i).unwrap();
        let outputs = m.outputs();
        let taps = m.taps();
        let groups = m.groups.clone();
        let q = m.quant.as_mut().unwrap();
        if let ActScales::PerTensor(s) = &mut q.act_scales {
            *s *= 64.0;
        }
        q.weight_codes.iter_mut().for_each(|c| *c = (*c / 16).clamp(-8, 7));
        q.shifts.act.iter_mut().for_each(|p| *p = 0);
        q.shifts.weight.iter_mut().flatten().for_each(|p| *p = 0);
        q.nibbles = lower_weights(&q.weight_codes, outputs, taps, &groups, &q.shifts.weight);
    }
    let eval = FitnessEval::new(&net, &samples, Schedule::Parallel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let flags: Vec<Vec<bool>> =
            eval.group_counts().iter().map(|&n| (0..n).map(|_| rng.random_bool(0.6)).collect()).collect();
        assert_eq!(eval.fitness(&flags, Schedule::Parallel).unwrap(), 0.0);
    }
}
