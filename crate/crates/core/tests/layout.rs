use mixq::bitlower::ExtractionMode;
use mixq::evoselect::{includes, select_chain, Algorithm, EvoConfig, FitnessEval};
use mixq::layout::{apply_layout, plan_layout, set_ratio};
use mixq::netsim::synth::random_net;
use mixq::netsim::{prepare_network, Executor, NetworkGraph, PrecisionMode, PrepareConfig, QuantConfig, Selection};
use mixq::qtensor::{FloatTensor, ScaleGranularity};
use mixq::scoring::{score_network, ScoreTable};
use mixq::Schedule;

fn bits(ys: &[FloatTensor]) -> Vec<Vec<u32>> {
    ys.iter().map(|y| y.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn outputs(net: &NetworkGraph, xs: &[FloatTensor], mode: PrecisionMode) -> Vec<Vec<u32>> {
    bits(&Executor::new(net).unwrap().run_batch(xs, mode, Schedule::Parallel).unwrap())
}

/// Prepared random net with a random nested selection chain, or `None` when
/// every matmul layer is pinned to 8 bits.
fn selected_net(seed: u64) -> Option<(NetworkGraph, Vec<FloatTensor>)> {
    let layers = 2 + (seed % 5) as usize;
    let (net, data) = random_net(seed, layers, 40).unwrap();
    let cfg = PrepareConfig {
        quant: QuantConfig {
            act_granularity: if seed % 3 == 0 { ScaleGranularity::PerChannel } else { ScaleGranularity::PerTensor },
            mode: if seed % 2 == 0 { ExtractionMode::Static } else { ExtractionMode::Dynamic },
        },
        ..PrepareConfig::default()
    };
    let mut net = prepare_network(&net, &data[..24], &cfg, Schedule::Parallel).unwrap();
    let counts = net.selectable_group_counts();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let mut ks: Vec<usize> = [total / 4, total / 2, 3 * total / 4, total].into_iter().filter(|&k| k > 0).collect();
    ks.dedup();
    let ratios: Vec<f64> = ks.iter().map(|&k| k as f64 / total as f64).collect();
    let eval = FitnessEval::new(&net, &data[24..28], Schedule::Sequential).unwrap();
    let scores = ScoreTable::from_scores(&score_network(&net).unwrap(), &counts).unwrap();
    let evo = EvoConfig { seed, ..EvoConfig::default() };
    let chain = select_chain(&eval, &scores, &ratios, Algorithm::Random, &evo, Schedule::Sequential).unwrap();
    net.selections = chain.into_iter().map(|c| Selection { ratio: c.ratio, flags: c.flags }).collect();
    Some((net, data[24..].to_vec()))
}

#[test]
fn random_nets_are_bit_identical_after_layout() {
    let mut checked = 0;
    let mut permuted = 0;
    for seed in 0..50 {
        let Some((net, xs)) = selected_net(seed) else { continue };
        let plan = plan_layout(&net, &net.selections).unwrap();
        let laid = apply_layout(&net, &plan).unwrap();
        permuted += usize::from(plan.perms.iter().any(|p| !p.is_identity()));
        let mut modes = vec![PrecisionMode::Fp32, PrecisionMode::Int8, PrecisionMode::Mixed(0.0)];
        modes.extend(net.selections.iter().map(|s| PrecisionMode::Mixed(s.ratio)));
        for mode in modes {
            assert_eq!(outputs(&net, &xs, mode), outputs(&laid, &xs, mode), "seed {seed} {mode:?}");
        }
        checked += 1;
    }
    assert!(checked >= 40, "only {checked} nets had selectable layers");
    assert!(permuted >= checked / 2, "only {permuted} of {checked} layouts moved channels");
}

#[test]
fn boundaries_are_nested_and_switching_round_trips() {
    for seed in 0..20 {
        let Some((net, xs)) = selected_net(seed) else { continue };
        for w in net.selections.windows(2) {
            assert!(includes(&w[1].flags, &w[0].flags));
        }
        let plan = plan_layout(&net, &net.selections).unwrap();
        for w in plan.boundaries.windows(2) {
            assert!(w[0].max_4bit_ch.iter().zip(&w[1].max_4bit_ch).all(|(a, b)| a <= b));
        }
        let mut laid = apply_layout(&net, &plan).unwrap();
        let top = net.selections.last().unwrap().ratio;

        set_ratio(&mut laid, 0.0).unwrap();
        let a = outputs(&laid, &xs, PrecisionMode::Active);
        assert_eq!(a, outputs(&net, &xs, PrecisionMode::Int8));
        set_ratio(&mut laid, top).unwrap();
        let b = outputs(&laid, &xs, PrecisionMode::Active);
        assert_eq!(b, outputs(&net, &xs, PrecisionMode::Mixed(top)));
        set_ratio(&mut laid, 0.0).unwrap();
        assert_eq!(outputs(&laid, &xs, PrecisionMode::Active), a, "seed {seed}");
    }
}

#[test]
fn unprepared_ratio_is_rejected() {
    let (net, _) = (0..).find_map(selected_net).unwrap();
    let plan = plan_layout(&net, &net.selections).unwrap();
    let mut laid = apply_layout(&net, &plan).unwrap();
    assert!(matches!(set_ratio(&mut laid, 0.123), Err(mixq::Error::UnpreparedRatio { .. })));
}
