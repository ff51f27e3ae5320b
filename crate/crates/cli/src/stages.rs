use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use mixq::bitlower::{ExtractionMode, ExtractionPlan, LayerShifts};
use mixq::evoselect::{count_set, select_chain, Algorithm, ChainResult, EvoConfig, FitnessEval};
use mixq::gemmcheck::{run_sweep, sweep_csv};
use mixq::io::{write_json, write_text, Dataset, ModelDir};
use mixq::layout::{apply_layout, plan_layout};
use mixq::netsim::metrics::{branch_loss, top1_accuracy};
use mixq::netsim::reports::{l2_csv, l2_report, saturation_report, unused_bit_report, unused_bits_csv};
use mixq::netsim::synth::{generate, scale_inputs, SynthConfig};
use mixq::netsim::{
    prepare_network, total_loss, Executor, LossInputs, NetworkGraph, PrecisionMode, PrepareConfig, QuantConfig,
    Selection,
};
use mixq::qtensor::{CalibrationConfig, FloatTensor, ScaleGranularity};
use mixq::rng::stage_seed;
use mixq::scoring::{score_network, scores_csv, ScoreTable};
use mixq::serve::{
    effective_accuracy, fraction_over, gen_poisson, windows_csv, Policy, Scenario, ServingTrace,
};
use mixq::{Error, Schedule};

use crate::{
    AblateArgs, ActScaleArg, AlgoArg, CalibrateArgs, DemoArgs, EvoArgs, GemmCheckArgs, InferArgs, Mode, PolicyArg,
    Preset, SaturationArgs, SelectArgs, ServeArgs, SynthArgs,
};

pub struct Ctx {
    pub dir: PathBuf,
    pub schedule: Schedule,
}

pub const FP32: &str = "fp32";
pub const CALIBRATED: &str = "calibrated";
pub const SELECTED: &str = "selected";
pub const LAID_OUT: &str = "laid_out";

/// A failure with its own exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub msg: String,
}

impl std::fmt::Display for Fail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Fail {}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    Fail { code: 4, msg: msg.into() }.into()
}

fn bad_args(msg: impl Into<String>) -> anyhow::Error {
    Fail { code: 2, msg: msg.into() }.into()
}

/// 2 bad arguments, 3 missing artifacts, 4 validation failure, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Fail>() {
            return f.code;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::InvalidParams(_)
                | Error::InvalidConfig(_)
                | Error::UnrepresentableRatio { .. }
                | Error::UnpreparedRatio { .. } => 2,
                Error::MissingArtifact { .. } | Error::NotPrepared(_) | Error::EmptyCalibration => 3,
                Error::Io { .. } => 1,
                _ => 4,
            };
        }
    }
    1
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Loads a stage directory, naming the stage that produces it when absent.
    fn load(&self, sub: &str, producer: &'static str) -> anyhow::Result<ModelDir> {
        let dir = self.path(sub);
        if !dir.join(mixq::io::MANIFEST).exists() {
            return Err(Error::MissingArtifact {
                artifact: format!("{}", dir.join(mixq::io::MANIFEST).display()),
                stage: producer,
            }
            .into());
        }
        Ok(ModelDir::load(&dir)?)
    }

    /// The most processed quantized model available.
    fn load_latest(&self) -> anyhow::Result<(ModelDir, &'static str)> {
        for sub in [LAID_OUT, SELECTED] {
            if self.path(sub).join(mixq::io::MANIFEST).exists() {
                return Ok((ModelDir::load(&self.path(sub))?, sub));
            }
        }
        Ok((self.load(CALIBRATED, "calibrate")?, CALIBRATED))
    }

    fn write(&self, name: &str, text: &str) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        write_text(&self.path(name), text)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        write_json(&self.path(name), value)?;
        Ok(())
    }
}

fn synth_config(preset: Preset, seed: u64) -> SynthConfig {
    match preset {
        Preset::Mlp => SynthConfig::mlp(seed),
        Preset::Conv => SynthConfig::conv(seed),
    }
}

fn build_synth(preset: Preset, seed: u64) -> anyhow::Result<ModelDir> {
    let m = generate(&synth_config(preset, stage_seed(seed, "synth")))?;
    let mut dir = ModelDir::new(m.net);
    dir.datasets.insert("calib".into(), Dataset { samples: m.calib, labels: None });
    dir.datasets.insert("eval".into(), Dataset { samples: m.eval, labels: Some(m.eval_labels) });
    Ok(dir)
}

pub fn synth(ctx: &Ctx, a: &SynthArgs) -> anyhow::Result<()> {
    let dir = build_synth(a.preset, a.seed)?;
    dir.save(&ctx.path(FP32))?;
    let net = &dir.net;
    println!(
        "synth: {} nodes, {} matmul layers, {} selectable groups -> {}",
        net.nodes.len(),
        net.matmul_nodes().len(),
        net.selectable_group_counts().iter().sum::<usize>(),
        ctx.path(FP32).display()
    );
    Ok(())
}

fn prepare_config(a: &CalibrateArgs) -> anyhow::Result<PrepareConfig> {
    if a.coverage.is_some_and(|q| !(q > 0.0 && q <= 1.0)) {
        return Err(bad_args("--coverage must be in (0, 1]"));
    }
    if a.batch_size == 0 {
        return Err(bad_args("--batch-size must be positive"));
    }
    Ok(PrepareConfig {
        calibration: CalibrationConfig { coverage_quantile: a.coverage, ..CalibrationConfig::default() },
        quant: QuantConfig {
            act_granularity: match a.act_scales {
                ActScaleArg::Tensor => ScaleGranularity::PerTensor,
                ActScaleArg::Group => ScaleGranularity::PerChannel,
            },
            mode: match a.mode {
                Mode::Static => ExtractionMode::Static,
                Mode::Dynamic => ExtractionMode::Dynamic,
            },
        },
        batch_size: a.batch_size,
    })
}

pub fn calibrate(ctx: &Ctx, a: &CalibrateArgs) -> anyhow::Result<()> {
    let cfg = prepare_config(a)?;
    let src = ctx.load(FP32, "synth")?;
    let calib = &src.dataset("calib")?.samples;
    let net = prepare_network(&src.net, calib, &cfg, ctx.schedule)?;
    let out = ModelDir { net, datasets: src.datasets.clone() };
    out.save(&ctx.path(CALIBRATED))?;
    let plan = out.net.extraction_plan().expect("prepared network has a plan");
    let mean_shift = {
        let s: Vec<f64> = plan.layers.iter().flat_map(|l| l.act.iter().map(|&v| f64::from(v))).collect();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    };
    println!(
        "calibrate: {} samples, {:?} extraction, mean activation shift {:.3} -> {}",
        calib.len(),
        plan.mode,
        mean_shift,
        ctx.path(CALIBRATED).display()
    );
    Ok(())
}

pub fn score(ctx: &Ctx) -> anyhow::Result<()> {
    let m = ctx.load(CALIBRATED, "calibrate")?;
    let scores = score_network(&m.net)?;
    ctx.write("scores.csv", &scores_csv(&scores))?;
    println!("score: {} groups -> {}", scores.len(), ctx.path("scores.csv").display());
    Ok(())
}

fn evo_config(a: &EvoArgs, seed: u64) -> anyhow::Result<EvoConfig> {
    let cfg = EvoConfig {
        population: a.population,
        generations: a.generations,
        elites: a.elites,
        parents: a.parents,
        mutation: a.mutation,
        samples: a.samples,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn algorithm(a: AlgoArg) -> Algorithm {
    match a {
        AlgoArg::Evo => Algorithm::Evo,
        AlgoArg::Greedy => Algorithm::Greedy,
        AlgoArg::Random => Algorithm::Random,
    }
}

fn algo_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Evo => "evo",
        Algorithm::Greedy => "greedy",
        Algorithm::Random => "random",
    }
}

/// Runs a selection chain on the first `cfg.samples` calibration samples.
fn run_selection(
    net: &NetworkGraph,
    calib: &[FloatTensor],
    ratios: &[f64],
    algo: Algorithm,
    cfg: &EvoConfig,
    schedule: Schedule,
) -> anyhow::Result<Vec<ChainResult>> {
    if net.selectable_nodes().is_empty() {
        return Err(validation("network has no selectable layers"));
    }
    let samples = &calib[..cfg.samples.min(calib.len())];
    let eval = FitnessEval::new(net, samples, schedule)?;
    let scores = ScoreTable::from_scores(&score_network(net)?, &net.selectable_group_counts())?;
    Ok(select_chain(&eval, &scores, ratios, algo, cfg, schedule)?)
}

pub fn select(ctx: &Ctx, a: &SelectArgs) -> anyhow::Result<()> {
    if a.ratios.is_empty() || a.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(bad_args("ratios must lie in [0, 1]"));
    }
    let cfg = evo_config(&a.evo, stage_seed(a.seed, "select"))?;
    let src = ctx.load(CALIBRATED, "calibrate")?;
    let algo = algorithm(a.algo);
    let chain = run_selection(&src.net, &src.dataset("calib")?.samples, &a.ratios, algo, &cfg, ctx.schedule)?;

    let mut net = src.net.clone();
    net.selections = chain.iter().map(|c| Selection { ratio: c.ratio, flags: c.flags.clone() }).collect();
    ModelDir { net, datasets: src.datasets.clone() }.save(&ctx.path(SELECTED))?;

    let total: usize = src.net.selectable_group_counts().iter().sum();
    let mut csv = String::from("ratio,algo,fitness,low_groups,total_groups\n");
    let mut hist = String::from("ratio,generation,best_fitness\n");
    for c in &chain {
        writeln!(csv, "{},{},{},{},{}", c.ratio, algo_name(algo), c.fitness, count_set(&c.flags), total)?;
        for (g, f) in c.history.iter().enumerate() {
            writeln!(hist, "{},{},{}", c.ratio, g, f)?;
        }
        println!("select: ratio {:.2} {} fitness {:.6}", c.ratio, algo_name(algo), c.fitness);
    }
    ctx.write("selection.csv", &csv)?;
    if algo == Algorithm::Evo {
        ctx.write("selection_history.csv", &hist)?;
    }
    Ok(())
}

/// Bitwise output equality on `inputs` at every prepared ratio.
fn check_layout(before: &NetworkGraph, after: &NetworkGraph, inputs: &[FloatTensor], schedule: Schedule) -> anyhow::Result<usize> {
    let (eb, ea) = (Executor::new(before)?, Executor::new(after)?);
    let mut mismatches = 0;
    let mut ratios = vec![0.0];
    ratios.extend(after.prepared_ratios());
    for r in ratios {
        let yb = eb.run_batch(inputs, PrecisionMode::Mixed(r), schedule)?;
        let ya = ea.run_batch(inputs, PrecisionMode::Mixed(r), schedule)?;
        mismatches += yb
            .iter()
            .zip(&ya)
            .filter(|(b, a)| b.data().iter().map(|v| v.to_bits()).ne(a.data().iter().map(|v| v.to_bits())))
            .count();
    }
    Ok(mismatches)
}

pub fn layout(ctx: &Ctx) -> anyhow::Result<()> {
    let src = ctx.load(SELECTED, "select")?;
    let plan = plan_layout(&src.net, &src.net.selections)?;
    let laid = apply_layout(&src.net, &plan)?;
    let eval = &src.dataset("eval")?.samples;
    let probe = &eval[..eval.len().min(32)];
    let mismatches = check_layout(&src.net, &laid, probe, ctx.schedule)?;
    if mismatches > 0 {
        return Err(validation(format!("laid-out network differs from the original on {mismatches} outputs")));
    }
    ModelDir { net: laid.clone(), datasets: src.datasets.clone() }.save(&ctx.path(LAID_OUT))?;
    ctx.write_json("layout.json", &plan)?;
    println!(
        "layout: {} permuted layers, {} reorder ops, outputs identical on {} samples at {} ratios -> {}",
        plan.perms.iter().filter(|p| !p.is_identity()).count(),
        laid.count_reorders(),
        probe.len(),
        laid.prepared_ratios().len() + 1,
        ctx.path(LAID_OUT).display()
    );
    Ok(())
}

pub fn gemm_check(ctx: &Ctx, a: &GemmCheckArgs) -> anyhow::Result<()> {
    let results = run_sweep(a.seed, a.cases, ctx.schedule)?;
    ctx.write("gemm_check.csv", &sweep_csv(&results))?;
    println!("{:<6} {:<7} {:<24} {:>3} {:>5} {:<8} {:>10}  result", "case", "kernel", "shape", "gs", "ratio", "mode", "mismatches");
    for r in &results {
        println!(
            "{:<6} {:<7} {:<24} {:>3} {:>5.2} {:<8} {:>10}  {}",
            r.case,
            r.kernel,
            r.shape,
            r.group_size,
            r.ratio,
            format!("{:?}", r.mode).to_lowercase(),
            r.mismatches,
            if r.pass() { "pass" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.pass()).count();
    println!("gemm-check: {} of {} cases pass", results.len() - failed, results.len());
    if failed > 0 {
        return Err(validation(format!("{failed} kernel cases disagree with the oracle")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct InferRow {
    pub precision: String,
    pub ratio: f64,
    pub top1: f64,
    pub l2_to_int8: f64,
    pub loss: f64,
}

fn logits_of(exec: &Executor<'_>, inputs: &[FloatTensor], mode: PrecisionMode, schedule: Schedule) -> anyhow::Result<Vec<Vec<f32>>> {
    Ok(exec.run_batch(inputs, mode, schedule)?.into_iter().map(FloatTensor::into_data).collect())
}

fn mean_l2(a: &[Vec<f32>], b: &[Vec<f32>]) -> anyhow::Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += mixq::netsim::l2_distance(x, y)?;
    }
    Ok(s / a.len().max(1) as f64)
}

fn infer_rows(net: &NetworkGraph, data: &Dataset, ratios: &[f64], schedule: Schedule) -> anyhow::Result<Vec<InferRow>> {
    let labels = data.labels.as_ref().ok_or_else(|| validation("eval dataset has no labels"))?;
    let exec = Executor::new(net)?;
    let fp32 = logits_of(&exec, &data.samples, PrecisionMode::Fp32, schedule)?;
    let int8 = logits_of(&exec, &data.samples, PrecisionMode::Int8, schedule)?;
    let row = |precision: &str, ratio: f64, logits: &[Vec<f32>]| -> anyhow::Result<InferRow> {
        let loss = total_loss(&LossInputs {
            logits_low: logits.to_vec(),
            logits_high: int8.clone(),
            logits_fp32: fp32.clone(),
            hard_labels: labels.clone(),
            lambda: LossInputs::DEFAULT_LAMBDA,
        })?;
        Ok(InferRow {
            precision: precision.into(),
            ratio,
            top1: top1_accuracy(logits, labels),
            l2_to_int8: mean_l2(logits, &int8)?,
            loss,
        })
    };
    let mut rows = vec![row("fp32", 0.0, &fp32)?, row("int8", 0.0, &int8)?];
    for &r in ratios {
        let mixed = logits_of(&exec, &data.samples, PrecisionMode::Mixed(r), schedule)?;
        rows.push(row("mixed", r, &mixed)?);
    }
    Ok(rows)
}

fn infer_csv(rows: &[InferRow]) -> String {
    let mut s = String::from("precision,ratio,top1,l2_to_int8,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.precision, r.ratio, r.top1, r.l2_to_int8, r.loss));
    }
    s
}

pub fn infer(ctx: &Ctx, a: &InferArgs) -> anyhow::Result<()> {
    let (m, stage) = ctx.load_latest()?;
    let ratios = if a.ratios.is_empty() { m.net.prepared_ratios() } else { a.ratios.clone() };
    let rows = infer_rows(&m.net, m.dataset("eval")?, &ratios, ctx.schedule)?;
    ctx.write("infer.csv", &infer_csv(&rows))?;
    println!("infer ({stage} model):");
    for r in &rows {
        println!("  {:<6} ratio {:.2}  top1 {:.4}  l2_to_int8 {:.6}  loss {:.6}", r.precision, r.ratio, r.top1, r.l2_to_int8, r.loss);
    }
    Ok(())
}

pub fn report_bits(ctx: &Ctx) -> anyhow::Result<()> {
    let m = ctx.load(CALIBRATED, "calibrate")?;
    let rows = unused_bit_report(&m.net)?;
    ctx.write("unused_bits.csv", &unused_bits_csv(&rows))?;
    for tensor in ["activation", "weight"] {
        let mut counts = [0usize; 5];
        for r in rows.iter().filter(|r| r.tensor == tensor) {
            counts.iter_mut().zip(r.counts).for_each(|(a, b)| *a += b);
        }
        let total: usize = counts.iter().sum();
        let pct: Vec<String> = counts.iter().map(|&c| format!("{:.1}%", 100.0 * c as f64 / total.max(1) as f64)).collect();
        println!("report-bits: {tensor:<10} unused 0/1/2/3/4+ bits: {}", pct.join(" "));
    }
    Ok(())
}

pub fn report_saturation(ctx: &Ctx, a: &SaturationArgs) -> anyhow::Result<()> {
    if !(a.scale.is_finite() && a.scale > 0.0) {
        return Err(bad_args("--scale must be positive"));
    }
    let m = ctx.load(CALIBRATED, "calibrate")?;
    let eval = &m.dataset("eval")?.samples;
    let base = m.net.extraction_plan().ok_or(Error::NotPrepared("saturation report (run calibrate first)"))?;
    let mut csv = String::from("mode,inputs,layer,channels,saturated,saturated_percent\n");
    let scaled = scale_inputs(eval, a.scale);
    for mode in [ExtractionMode::Static, ExtractionMode::Dynamic] {
        let plan = ExtractionPlan { mode, ..base.clone() };
        for (label, inputs) in [("calibrated", eval), ("scaled", &scaled)] {
            let rows = saturation_report(&m.net, inputs, &plan, ctx.schedule)?;
            let (mut sat, mut ch) = (0, 0);
            for r in &rows {
                writeln!(csv, "{},{},{},{},{},{}", mode_name(mode), label, r.layer, r.channels, r.saturated, r.percent())?;
                sat += r.saturated;
                ch += r.channels;
            }
            println!(
                "report-saturation: {:<7} {:<10} {:>6.2}% of channels saturated",
                mode_name(mode),
                label,
                100.0 * sat as f64 / ch.max(1) as f64
            );
        }
    }
    ctx.write("saturation.csv", &csv)
}

fn mode_name(m: ExtractionMode) -> &'static str {
    match m {
        ExtractionMode::Static => "static",
        ExtractionMode::Dynamic => "dynamic",
    }
}

pub fn report_l2(ctx: &Ctx) -> anyhow::Result<()> {
    let m = ctx.load(CALIBRATED, "calibrate")?;
    let eval = &m.dataset("eval")?.samples;
    let rows = l2_report(&m.net, eval, ctx.schedule)?;
    ctx.write("l2.csv", &l2_csv(&rows))?;
    for r in &rows {
        let mixed: Vec<String> = r.mixed.iter().map(|v| format!("{v:.4}")).collect();
        println!("report-l2: {:<12} mixed 25/50/75/100% {}  uniform int4 {:.4}", r.layer, mixed.join(" "), r.uniform_int4);
    }
    Ok(())
}

fn parse_quality(pairs: &[String]) -> anyhow::Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            let (r, q) = p.split_once(':').ok_or_else(|| bad_args(format!("quality entry {p:?} is not ratio:quality")))?;
            Ok((r.trim().parse()?, q.trim().parse()?))
        })
        .collect::<anyhow::Result<_>>()
        .map_err(|e: anyhow::Error| if exit_code(&e) == 2 { e } else { bad_args(format!("bad --quality: {e}")) })
}

/// Top-1 per ratio from `infer.csv` (int8 as ratio 0).
fn quality_from_infer(path: &Path) -> Option<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 3 {
            return None;
        }
        let ratio: f64 = f[1].parse().ok()?;
        let top1: f64 = f[2].parse().ok()?;
        match f[0] {
            "int8" if !out.iter().any(|&(r, _)| r == 0.0) => out.push((0.0, top1)),
            "mixed" if ratio > 0.0 => out.push((ratio, top1)),
            _ => {}
        }
    }
    Some(out)
}

#[derive(Debug, Serialize)]
struct ServeSummary {
    policy: String,
    requests: usize,
    windows: usize,
    threshold_ms: f64,
    fraction_windows_over_threshold: f64,
    fixed_8bit_fraction_over_threshold: f64,
    completed_in_horizon: usize,
    in_queue_at_end: usize,
    saturated: bool,
    mean_ratio: f64,
    effective_accuracy: Option<f64>,
    int8_accuracy: Option<f64>,
    full_4bit_accuracy: Option<f64>,
    scenario: Scenario,
}

pub fn serve_sim(ctx: &Ctx, a: &ServeArgs) -> anyhow::Result<()> {
    let mut sc = Scenario::default();
    let positive = |v: Option<f64>, name: &str| -> anyhow::Result<Option<f64>> {
        match v {
            Some(x) if !(x.is_finite() && x > 0.0) => Err(bad_args(format!("--{name} must be positive"))),
            other => Ok(other),
        }
    };
    if let Some(v) = positive(a.threshold_ms, "threshold-ms")? {
        sc.threshold = v * 1e-3;
    }
    if let Some(v) = positive(a.window, "window")? {
        sc.window = v;
    }
    if let Some(v) = positive(a.service_ms, "service-ms")? {
        sc.cost.matmul_8bit = v * 1e-3;
    }
    if let Some(v) = positive(a.speedup, "speedup")? {
        sc.cost.speedup_4bit = v;
    }
    if let Some(v) = positive(a.min_rate, "min-rate")? {
        sc.load.min_rate = v;
    }
    if let Some(v) = positive(a.period, "period")? {
        sc.load.period = v;
    }
    if let Some(v) = a.dynamic_overhead {
        sc.cost.dynamic_overhead = v;
    }
    if let Some(v) = a.switch_ms {
        sc.cost.switch_cost = v * 1e-3;
    }
    if let Some(b) = a.batch_size {
        sc.batch_size = b;
    }
    sc.cost.validate()?;
    if !(0.0..=1.0).contains(&a.ratio) {
        return Err(bad_args("--ratio must lie in [0, 1]"));
    }

    let seed = stage_seed(a.seed, "serve");
    let trace = match (&a.trace, a.rate) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
                artifact: format!("{} ({e})", path.display()),
                stage: "serve-sim --trace",
            })?;
            let arrivals = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| l.split(',').next().unwrap_or(l).parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad_args(format!("trace {}: {e}", path.display())))?;
            ServingTrace::from_arrivals(arrivals, a.duration.unwrap_or(0.0))?
        }
        (None, Some(rate)) => gen_poisson(rate, a.duration.unwrap_or(60.0), seed)?,
        (None, None) => {
            if let Some(d) = positive(a.duration, "duration")? {
                sc.load.duration = d;
            }
            sc.trace(seed)?
        }
    };

    let fixed8 = sc.run(&trace, &sc.fixed(0.0))?;
    let (name, result) = match a.policy {
        PolicyArg::Fixed => (format!("fixed:{}", a.ratio), sc.run(&trace, &sc.fixed(a.ratio))?),
        PolicyArg::Adaptive => {
            let table = sc.profile(stage_seed(a.seed, "serve.profile"), ctx.schedule)?;
            ctx.write_json("serve_profile.json", &table)?;
            ("adaptive".to_string(), sc.run(&trace, &Policy::Adaptive(sc.controller(table)))?)
        }
    };

    let quality = if a.quality.is_empty() {
        quality_from_infer(&ctx.path("infer.csv"))
    } else {
        Some(parse_quality(&a.quality)?)
    };
    let effective = match &quality {
        Some(q) if !result.timeline.is_empty() => effective_accuracy(&result.timeline, q).ok(),
        _ => None,
    };
    let lookup = |r: f64| quality.as_ref().and_then(|q| q.iter().find(|(x, _)| (x - r).abs() < 1e-9).map(|p| p.1));
    let span: f64 = result.timeline.iter().map(|s| s.end - s.start).sum();
    let mean_ratio = result.timeline.iter().map(|s| s.ratio * (s.end - s.start)).sum::<f64>() / span.max(f64::MIN_POSITIVE);

    ctx.write("serve_windows.csv", &windows_csv(&result.windows))?;
    let mut tl = String::from("start,end,ratio\n");
    for s in &result.timeline {
        writeln!(tl, "{},{},{}", s.start, s.end, s.ratio)?;
    }
    ctx.write("serve_timeline.csv", &tl)?;
    if a.request_log {
        let mut log = String::from("arrival,start,completion,ratio\n");
        for r in &result.requests {
            writeln!(log, "{},{},{},{}", r.arrival, r.start, r.completion, r.ratio)?;
        }
        ctx.write("serve_requests.csv", &log)?;
    }
    let summary = ServeSummary {
        policy: name.clone(),
        requests: trace.arrivals.len(),
        windows: result.windows.len(),
        threshold_ms: sc.threshold * 1e3,
        fraction_windows_over_threshold: fraction_over(&result.windows, sc.threshold),
        fixed_8bit_fraction_over_threshold: fraction_over(&fixed8.windows, sc.threshold),
        completed_in_horizon: result.completed_in_horizon,
        in_queue_at_end: result.in_queue_at_end,
        saturated: result.saturated,
        mean_ratio,
        effective_accuracy: effective,
        int8_accuracy: lookup(0.0),
        full_4bit_accuracy: lookup(1.0),
        scenario: sc.clone(),
    };
    ctx.write_json("serve_summary.json", &summary)?;
    println!(
        "serve-sim: {} requests, policy {name}: {:.1}% of windows over {:.1} ms (fixed 8-bit {:.1}%), mean ratio {:.3}{}",
        summary.requests,
        100.0 * summary.fraction_windows_over_threshold,
        summary.threshold_ms,
        100.0 * summary.fixed_8bit_fraction_over_threshold,
        mean_ratio,
        if result.saturated { ", SATURATED" } else { "" }
    );
    if let Some(e) = effective {
        println!("serve-sim: effective accuracy {e:.4}");
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub config: &'static str,
    pub selection: &'static str,
    pub extraction: &'static str,
    pub top1: f64,
    pub l2_to_int8: f64,
    pub loss: f64,
}

/// Random selection with top-nibble extraction, then one change per row.
pub fn ablation_rows(preset: Preset, seed: u64, ratio: f64, evo: &EvoArgs, schedule: Schedule) -> anyhow::Result<Vec<AblationRow>> {
    let model = build_synth(preset, seed)?;
    let calib = &model.dataset("calib")?.samples;
    let eval = model.dataset("eval")?;
    let labels = eval.labels.as_ref().expect("synthetic eval has labels");
    let planned = prepare_network(&model.net, calib, &PrepareConfig::default(), schedule)?;

    let mut naive = planned.clone();
    let plan = planned.extraction_plan().expect("prepared");
    let naive_plan = ExtractionPlan {
        mode: ExtractionMode::Static,
        layers: plan
            .layers
            .iter()
            .map(|l| LayerShifts::naive(&l.layer, l.act.len(), l.weight.first().map_or(0, Vec::len)))
            .collect(),
    };
    naive.set_extraction_plan(&naive_plan)?;
    let mut dynamic = planned.clone();
    dynamic.set_extraction_plan(&ExtractionPlan { mode: ExtractionMode::Dynamic, ..plan })?;

    let cfg = evo_config(evo, stage_seed(seed, "ablate"))?;
    let pick = |net: &NetworkGraph, algo| -> anyhow::Result<Vec<Vec<bool>>> {
        Ok(run_selection(net, calib, &[ratio], algo, &cfg, schedule)?.remove(0).flags)
    };
    let random_naive = pick(&naive, Algorithm::Random)?;
    let random = pick(&planned, Algorithm::Random)?;
    let greedy = pick(&planned, Algorithm::Greedy)?;
    let evo_flags = pick(&planned, Algorithm::Evo)?;

    let measure = |net: &NetworkGraph, flags: &[Vec<bool>]| -> anyhow::Result<(f64, f64, f64)> {
        let mut net = net.clone();
        net.selections = vec![Selection { ratio, flags: flags.to_vec() }];
        let exec = Executor::new(&net)?;
        let fp32 = logits_of(&exec, &eval.samples, PrecisionMode::Fp32, schedule)?;
        let int8 = logits_of(&exec, &eval.samples, PrecisionMode::Int8, schedule)?;
        let mixed = logits_of(&exec, &eval.samples, PrecisionMode::Mixed(ratio), schedule)?;
        Ok((top1_accuracy(&mixed, labels), mean_l2(&mixed, &int8)?, branch_loss(&mixed, &fp32, labels)?))
    };
    let rows: [(&str, &str, &str, &NetworkGraph, &Vec<Vec<bool>>); 5] = [
        ("random", "random", "top-nibble", &naive, &random_naive),
        ("+static", "random", "static", &planned, &random),
        ("+greedy", "greedy", "static", &planned, &greedy),
        ("+evolutionary", "evo", "static", &planned, &evo_flags),
        ("+dynamic", "evo", "dynamic", &dynamic, &evo_flags),
    ];
    rows.iter()
        .map(|&(config, selection, extraction, net, flags)| {
            let (top1, l2_to_int8, loss) = measure(net, flags)?;
            Ok(AblationRow { config, selection, extraction, top1, l2_to_int8, loss })
        })
        .collect()
}

pub fn ablate(ctx: &Ctx, a: &AblateArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.ratio) {
        return Err(bad_args("--ratio must lie in [0, 1]"));
    }
    let rows = ablation_rows(a.preset, a.seed, a.ratio, &a.evo, ctx.schedule)?;
    let mut csv = String::from("config,selection,extraction,ratio,top1,l2_to_int8,loss\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{},{},{}", r.config, r.selection, r.extraction, a.ratio, r.top1, r.l2_to_int8, r.loss)?;
        println!("ablate: {:<14} top1 {:.4}  l2_to_int8 {:.6}  loss {:.6}", r.config, r.top1, r.l2_to_int8, r.loss);
    }
    ctx.write("ablation.csv", &csv)
}

pub fn demo(ctx: &Ctx, a: &DemoArgs) -> anyhow::Result<()> {
    synth(ctx, &SynthArgs { preset: a.preset, seed: a.seed })?;
    calibrate(
        ctx,
        &CalibrateArgs { mode: Mode::Static, act_scales: ActScaleArg::Tensor, coverage: None, batch_size: 32 },
    )?;
    score(ctx)?;
    select(
        ctx,
        &SelectArgs { ratios: vec![0.25, 0.5, 0.75, 1.0], algo: AlgoArg::Evo, seed: a.seed, evo: a.evo.clone() },
    )?;
    layout(ctx)?;
    gemm_check(ctx, &GemmCheckArgs { cases: a.gemm_cases, seed: a.seed })?;
    infer(ctx, &InferArgs { ratios: Vec::new() })?;
    report_bits(ctx)?;
    report_saturation(ctx, &SaturationArgs { scale: 4.0 })?;
    report_l2(ctx)?;
    serve_sim(
        ctx,
        &ServeArgs {
            trace: None,
            rate: None,
            duration: None,
            min_rate: None,
            period: None,
            policy: PolicyArg::Adaptive,
            ratio: 0.0,
            threshold_ms: None,
            window: None,
            batch_size: None,
            service_ms: None,
            speedup: None,
            dynamic_overhead: None,
            switch_ms: None,
            quality: Vec::new(),
            request_log: false,
            seed: a.seed,
        },
    )?;
    ablate(ctx, &AblateArgs { preset: a.preset, seed: a.seed, ratio: 0.5, evo: a.evo.clone() })?;
    println!("demo: artifacts in {}", ctx.dir.display());
    Ok(())
}
