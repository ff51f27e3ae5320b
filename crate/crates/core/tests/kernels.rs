use mixq::bitlower::ExtractionMode;
use mixq::gemmcheck::{oracle_conv2d, oracle_gemm, run_sweep};
use mixq::kernels::{
    default_groups, lower_weights, mixed_conv2d_flags, mixed_gemm, mixed_gemm_flags, ConvGeometry, MixedConvArgs,
    MixedGemmArgs, WeightNibbles, MAX_REDUCTION,
};
use mixq::Schedule;
use proptest::prelude::*;

fn mode(dynamic: bool) -> ExtractionMode {
    if dynamic {
        ExtractionMode::Dynamic
    } else {
        ExtractionMode::Static
    }
}

#[derive(Debug, Clone)]
struct GemmCase {
    rows: usize,
    outputs: usize,
    gs: usize,
    x: Vec<i8>,
    w: Vec<i8>,
    low: Vec<bool>,
    ash: Vec<u8>,
    wsh: Vec<Vec<u8>>,
    dynamic: bool,
}

impl GemmCase {
    fn features(&self) -> usize {
        self.low.len() * self.gs
    }
}

fn gemm_case() -> impl Strategy<Value = GemmCase> {
    (1usize..4, 1usize..6, prop::sample::select(vec![1usize, 2, 4, 8]), 1usize..6, any::<bool>()).prop_flat_map(
        |(rows, outputs, gs, ng, dynamic)| {
            let f = gs * ng;
            (
                prop::collection::vec(any::<i8>(), rows * f),
                prop::collection::vec(any::<i8>(), outputs * f),
                prop::collection::vec(any::<bool>(), ng),
                prop::collection::vec(0u8..=4, ng),
                prop::collection::vec(prop::collection::vec(0u8..=4, outputs), ng),
            )
                .prop_map(move |(x, w, low, ash, wsh)| GemmCase { rows, outputs, gs, x, w, low, ash, wsh, dynamic })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gemm_matches_oracle(c in gemm_case(), cached in any::<bool>()) {
        let f = c.features();
        let groups = default_groups(f, c.gs);
        let nib = lower_weights(&c.w, c.outputs, 1, &groups, &c.wsh);
        let args = MixedGemmArgs {
            x: &c.x,
            rows: c.rows,
            w: &c.w,
            outputs: c.outputs,
            features: f,
            groups: &groups,
            max_4bit_ch: 0,
            act_shift: &c.ash,
            w_shift: &c.wsh,
            mode: mode(c.dynamic),
            nibbles: if cached { WeightNibbles::Cached(&nib) } else { WeightNibbles::OnTheFly },
        };
        let got = mixed_gemm_flags(&args, &c.low, Schedule::Sequential).unwrap();
        let want = oracle_gemm(&c.x, c.rows, &c.w, c.outputs, f, &groups, &c.low, &c.ash, &c.wsh, mode(c.dynamic));
        let got: Vec<i64> = got.acc.iter().map(|&v| i64::from(v)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn schedules_agree(c in gemm_case()) {
        let f = c.features();
        let groups = default_groups(f, c.gs);
        let args = MixedGemmArgs {
            x: &c.x, rows: c.rows, w: &c.w, outputs: c.outputs, features: f, groups: &groups,
            max_4bit_ch: 0, act_shift: &c.ash, w_shift: &c.wsh, mode: mode(c.dynamic),
            nibbles: WeightNibbles::OnTheFly,
        };
        let a = mixed_gemm_flags(&args, &c.low, Schedule::Sequential).unwrap();
        let b = mixed_gemm_flags(&args, &c.low, Schedule::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_ratio_is_plain_int8(c in gemm_case()) {
        let f = c.features();
        let groups = default_groups(f, c.gs);
        let args = MixedGemmArgs {
            x: &c.x, rows: c.rows, w: &c.w, outputs: c.outputs, features: f, groups: &groups,
            max_4bit_ch: 0, act_shift: &c.ash, w_shift: &c.wsh, mode: mode(c.dynamic),
            nibbles: WeightNibbles::OnTheFly,
        };
        let acc = mixed_gemm(&args, Schedule::Sequential).unwrap();
        for r in 0..c.rows {
            for o in 0..c.outputs {
                let dot: i32 = (0..f).map(|k| i32::from(c.x[r * f + k]) * i32::from(c.w[o * f + k])).sum();
                prop_assert_eq!(acc.total(r, o), dot);
            }
        }
    }

    #[test]
    fn conv_matches_oracle(
        cin_groups in 1usize..4,
        gs in prop::sample::select(vec![1usize, 2, 4]),
        outputs in 1usize..5,
        h in 1usize..7,
        w in 1usize..7,
        k in prop::sample::select(vec![(1usize, 1usize), (3, 3), (2, 1), (3, 2)]),
        stride in 1usize..3,
        padding in 0usize..2,
        dynamic in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let c_in = cin_groups * gs;
        prop_assume!(h + 2 * padding >= k.0 && w + 2 * padding >= k.1);
        let geo = ConvGeometry { channels: c_in, height: h, width: w, kernel_h: k.0, kernel_w: k.1, stride, padding };
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as u32 };
        let x: Vec<i8> = (0..c_in * h * w).map(|_| next() as i8).collect();
        let wt: Vec<i8> = (0..outputs * c_in * geo.taps()).map(|_| next() as i8).collect();
        let low: Vec<bool> = (0..cin_groups).map(|_| next() % 2 == 0).collect();
        let ash: Vec<u8> = (0..cin_groups).map(|_| (next() % 5) as u8).collect();
        let wsh: Vec<Vec<u8>> = (0..cin_groups).map(|_| (0..outputs).map(|_| (next() % 5) as u8).collect()).collect();
        let groups = default_groups(c_in, gs);
        let args = MixedConvArgs {
            x: &x, w: &wt, outputs, geometry: geo, groups: &groups, max_4bit_ch: 0,
            act_shift: &ash, w_shift: &wsh, mode: mode(dynamic), nibbles: WeightNibbles::OnTheFly,
        };
        let got = mixed_conv2d_flags(&args, &low, Schedule::Sequential).unwrap();
        let want = oracle_conv2d(&x, &wt, outputs, geo, &groups, &low, &ash, &wsh, mode(dynamic));
        let got: Vec<i64> = got.acc.iter().map(|&v| i64::from(v)).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn shipped_sweep_passes_on_both_schedules() {
    for schedule in [Schedule::Sequential, Schedule::Parallel] {
        let results = run_sweep(11, 60, schedule).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.pass()).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}

#[test]
fn unaligned_boundary_is_rejected() {
    let groups = default_groups(8, 4);
    let x = vec![1i8; 8];
    let w = vec![1i8; 8];
    let args = MixedGemmArgs {
        x: &x,
        rows: 1,
        w: &w,
        outputs: 1,
        features: 8,
        groups: &groups,
        max_4bit_ch: 3,
        act_shift: &[0, 0],
        w_shift: &[vec![0], vec![0]],
        mode: ExtractionMode::Static,
        nibbles: WeightNibbles::OnTheFly,
    };
    assert!(mixed_gemm(&args, Schedule::Sequential).is_err());
}

#[test]
fn longest_reduction_does_not_overflow() {
    for features in [MAX_REDUCTION, MAX_REDUCTION + 1] {
        let groups = default_groups(features, 1 << 12);
        let x = vec![-128i8; features];
        let w = vec![-128i8; features];
        let act = vec![0u8; groups.len()];
        let wsh = vec![vec![0u8]; groups.len()];
        let args = MixedGemmArgs {
            x: &x,
            rows: 1,
            w: &w,
            outputs: 1,
            features,
            groups: &groups,
            max_4bit_ch: 0,
            act_shift: &act,
            w_shift: &wsh,
            mode: ExtractionMode::Static,
            nibbles: WeightNibbles::OnTheFly,
        };
        let res = mixed_gemm(&args, Schedule::Sequential);
        if features == MAX_REDUCTION {
            assert_eq!(i64::from(res.unwrap().total(0, 0)), 128 * 128 * features as i64);
        } else {
            assert!(res.is_err());
        }
    }
}
