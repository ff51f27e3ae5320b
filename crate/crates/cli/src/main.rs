//! `mixq` command line: every pipeline stage reads and writes files under
//! one work directory, so stages can be rerun independently.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mixq::Schedule;

#[derive(Parser, Debug)]
#[command(name = "mixq", version, about = "Mixed 4/8-bit quantization pipeline")]
struct Cli {
    /// Work directory holding every stage's artifacts.
    #[arg(long, global = true, env = "MIXQ_OUT_DIR", default_value = "mixq-out")]
    dir: PathBuf,

    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActScaleArg {
    Tensor,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Evo,
    Greedy,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Adaptive,
    Fixed,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct CalibrateArgs {
    #[arg(long, value_enum, default_value = "static")]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "tensor")]
    pub act_scales: ActScaleArg,
    /// Central quantile coverage instead of min/max, e.g. 0.999.
    #[arg(long)]
    pub coverage: Option<f32>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug, Clone)]
pub struct EvoArgs {
    #[arg(long, default_value_t = 50)]
    pub population: usize,
    #[arg(long, default_value_t = 50)]
    pub generations: usize,
    #[arg(long, default_value_t = 2)]
    pub elites: usize,
    #[arg(long, default_value_t = 10)]
    pub parents: usize,
    #[arg(long, default_value_t = 0.01)]
    pub mutation: f64,
    /// Calibration samples used for fitness.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
}

#[derive(Args, Debug, Clone)]
pub struct SelectArgs {
    /// 4-bit ratios, comma separated.
    #[arg(long = "ratio", alias = "ratios", value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    pub ratios: Vec<f64>,
    #[arg(long, value_enum, default_value = "evo")]
    pub algo: AlgoArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub evo: EvoArgs,
}

#[derive(Args, Debug, Clone)]
pub struct GemmCheckArgs {
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    /// Ratios to evaluate; defaults to every prepared ratio.
    #[arg(long = "ratio", value_delimiter = ',')]
    pub ratios: Vec<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct SaturationArgs {
    /// Factor applied to eval inputs to push them outside calibration.
    #[arg(long, default_value_t = 4.0)]
    pub scale: f32,
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    /// Arrival times in seconds, one per line.
    #[arg(long, conflicts_with = "rate")]
    pub trace: Option<PathBuf>,
    /// Poisson rate in requests per second instead of the fluctuating preset.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Trace length in seconds (Poisson, or the preset's length if given).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Minimum rate of the fluctuating preset; the peak is three times this.
    #[arg(long)]
    pub min_rate: Option<f64>,
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long, value_enum, default_value = "adaptive")]
    pub policy: PolicyArg,
    /// Ratio of the fixed policy.
    #[arg(long, default_value_t = 0.0)]
    pub ratio: f64,
    #[arg(long)]
    pub threshold_ms: Option<f64>,
    /// Monitoring window in seconds.
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// 8-bit service time per request in milliseconds.
    #[arg(long)]
    pub service_ms: Option<f64>,
    #[arg(long)]
    pub speedup: Option<f64>,
    #[arg(long)]
    pub dynamic_overhead: Option<f64>,
    #[arg(long)]
    pub switch_ms: Option<f64>,
    /// Quality per ratio as `ratio:quality` pairs; defaults to `infer.csv` top-1.
    #[arg(long, value_delimiter = ',')]
    pub quality: Vec<String>,
    /// Also write the per-request log.
    #[arg(long)]
    pub request_log: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[command(flatten)]
    pub evo: EvoArgs,
}

#[derive(Args, Debug, Clone)]
pub struct DemoArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub gemm_cases: usize,
    #[command(flatten)]
    pub evo: EvoArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic fp32 model with calibration and eval data.
    Synth(SynthArgs),
    /// Calibrate activation ranges, quantize weights, plan extraction shifts.
    Calibrate(CalibrateArgs),
    /// Write per-group error-estimation scores.
    Score,
    /// Choose nested 4-bit groups for each ratio.
    Select(SelectArgs),
    /// Reorder channels so each ratio's 4-bit groups form a prefix.
    Layout,
    /// Compare the mixed kernels against the scalar oracle on random cases.
    GemmCheck(GemmCheckArgs),
    /// Evaluate fp32, int8 and mixed precision on the eval set.
    Infer(InferArgs),
    /// Unused high-order bits of activations and weights.
    ReportBits,
    /// Channels clipped by 4-bit extraction, static vs dynamic.
    ReportSaturation(SaturationArgs),
    /// Per-layer L2 distance of mixed and uniform 4-bit outputs to int8.
    ReportL2,
    /// Simulate serving with a fixed or adaptive 4-bit ratio.
    ServeSim(ServeArgs),
    /// Run every stage on a fresh synthetic model.
    Demo(DemoArgs),
    /// Quality ladder: random, static extraction, greedy, evolutionary, dynamic.
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = stages::Ctx {
        dir: cli.dir,
        schedule: if cli.sequential { Schedule::Sequential } else { Schedule::default() },
    };
    let result = match cli.command {
        Command::Synth(a) => stages::synth(&ctx, &a),
        Command::Calibrate(a) => stages::calibrate(&ctx, &a),
        Command::Score => stages::score(&ctx),
        Command::Select(a) => stages::select(&ctx, &a),
        Command::Layout => stages::layout(&ctx),
        Command::GemmCheck(a) => stages::gemm_check(&ctx, &a),
        Command::Infer(a) => stages::infer(&ctx, &a),
        Command::ReportBits => stages::report_bits(&ctx),
        Command::ReportSaturation(a) => stages::report_saturation(&ctx, &a),
        Command::ReportL2 => stages::report_l2(&ctx),
        Command::ServeSim(a) => stages::serve_sim(&ctx, &a),
        Command::Demo(a) => stages::demo(&ctx, &a),
        Command::Ablate(a) => stages::ablate(&ctx, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(stages::exit_code(&e))
        }
    }
}
