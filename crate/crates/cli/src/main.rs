mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use seqpack_core::flops::{builtin_presets, load_config_file, resolve_model, ConfigFile};
use seqpack_core::lengths::DEFAULT_LOGNORMAL_SIGMA;
use seqpack_core::profile::{bench_forward_backward, default_sweep, profile_scan, ThroughputRow};
use seqpack_core::strategies::Environment;
use seqpack_core::verify::{Fault, Suite, Tolerances};
use seqpack_core::{
    compare_strategies, gen_lengths, run_verify, BenchReport, LengthDistributionSpec, LengthKind,
    ModelConfig, Precision, VerifyConfig,
};

use output::{emit, fixed, sci, Format, Table};

#[derive(Parser)]
#[command(
    name = "seqpack",
    version,
    about = "Sequence packing experiments for selective state-space models"
)]
struct Cli {
    /// Pack capacity in slots; each command has its own default.
    #[arg(long, global = true)]
    capacity: Option<usize>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,

    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    /// JSON file with model presets, `{"models": [...]}`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw synthetic sequence lengths.
    GenLengths {
        #[command(flatten)]
        lengths: LengthArgs,
        /// Also write the lengths, one per line, to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Padding rate and FLOPs of pad-to-max, FIFO and greedy packing.
    CompareStrategies {
        #[command(flatten)]
        lengths: LengthArgs,
        #[arg(long, default_value = "mamba-1.4b")]
        model: String,
    },
    /// Time the parallel scan across sequence lengths.
    ProfileScan {
        /// Comma-separated lengths; defaults to powers of two and their
        /// neighbours up to --max-len.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        #[arg(long, default_value_t = 4096)]
        max_len: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        states: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Analytic FLOPs of model presets over packed and padded layouts.
    Flops {
        #[command(flatten)]
        lengths: LengthArgs,
        /// Model names; all known presets when omitted.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Run the invariant suites; exits nonzero if any check fails.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        /// Override a tolerance, e.g. `ssm-f32=1e-3`. Repeatable.
        #[arg(long = "tolerance")]
        tolerances: Vec<String>,
        /// Inject a known bug to confirm the suites catch it.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        #[arg(long)]
        pui_batches: Option<usize>,
        #[arg(long)]
        gradient_instances: Option<usize>,
        #[arg(long)]
        scan_lanes: Option<usize>,
        #[arg(long)]
        isolation_trials: Option<usize>,
    },
    /// End-to-end forward and backward timing: packed, padded, and one call
    /// per sequence.
    Bench {
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 256)]
        max_len: usize,
        #[arg(long, default_value_t = 81.0)]
        target_mean: f64,
        #[arg(long, default_value = "desk")]
        model: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Pui,
    Gradients,
    ScanOracle,
    Isolation,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::All => Suite::All,
            SuiteArg::Pui => Suite::Pui,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::ScanOracle => Suite::ScanOracle,
            SuiteArg::Isolation => Suite::Isolation,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    UnmaskedConv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    UniformRange,
    TruncatedLognormal,
    File,
}

#[derive(Args)]
struct LengthArgs {
    #[arg(long, value_enum, default_value_t = KindArg::TruncatedLognormal)]
    kind: KindArg,
    #[arg(long, default_value_t = 57)]
    min_len: usize,
    #[arg(long, default_value_t = 2048)]
    max_len: usize,
    #[arg(long, default_value_t = 646.0)]
    target_mean: f64,
    #[arg(long, default_value_t = 100_000)]
    count: usize,
    /// Log-space spread of the truncated lognormal.
    #[arg(long, default_value_t = DEFAULT_LOGNORMAL_SIGMA)]
    sigma: f64,
    /// Lengths file for `--kind file`.
    #[arg(long)]
    lengths_file: Option<PathBuf>,
}

impl LengthArgs {
    fn spec(&self, seed: u64) -> Result<LengthDistributionSpec> {
        let kind = match self.kind {
            KindArg::UniformRange => LengthKind::UniformRange,
            KindArg::TruncatedLognormal => LengthKind::TruncatedLognormal {
                sigma: Some(self.sigma),
            },
            KindArg::File => LengthKind::File {
                path: self
                    .lengths_file
                    .clone()
                    .context("--kind file needs --lengths-file")?,
            },
        };
        Ok(LengthDistributionSpec {
            kind,
            min_len: self.min_len,
            max_len: self.max_len,
            target_mean: self.target_mean,
            sample_count: self.count,
            seed,
        })
    }

    fn generate(&self, seed: u64) -> Result<(LengthDistributionSpec, Vec<usize>)> {
        let spec = self.spec(seed)?;
        let lengths = gen_lengths(&spec)?;
        Ok((spec, lengths))
    }
}

struct Ctx {
    capacity: Option<usize>,
    seed: u64,
    precision: Precision,
    format: Format,
    models: Option<ConfigFile>,
}

impl Ctx {
    fn environment(&self) -> Environment {
        Environment {
            precision: self.precision,
            threads: rayon::current_num_threads(),
            seed: self.seed,
        }
    }

    fn model(&self, name: &str) -> Result<ModelConfig> {
        Ok(resolve_model(name, self.models.as_ref())?)
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    let models = cli
        .config
        .as_deref()
        .map(|p| load_config_file(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let ctx = Ctx {
        capacity: cli.capacity,
        seed: cli.seed,
        precision: cli.precision.into(),
        format: cli.format,
        models,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| dispatch(&ctx, cli.command))
}

fn dispatch(ctx: &Ctx, command: Command) -> Result<bool> {
    match command {
        Command::GenLengths { lengths, output } => gen_lengths_cmd(ctx, &lengths, output),
        Command::CompareStrategies { lengths, model } => compare_cmd(ctx, &lengths, &model),
        Command::ProfileScan {
            sweep,
            max_len,
            channels,
            states,
            reps,
        } => profile_cmd(ctx, sweep, max_len, channels, states, reps),
        Command::Flops { lengths, models } => flops_cmd(ctx, &lengths, models),
        Command::Verify {
            suite,
            tolerances,
            fault,
            pui_batches,
            gradient_instances,
            scan_lanes,
            isolation_trials,
        } => {
            let mut cfg = VerifyConfig {
                suite: suite.into(),
                seed: ctx.seed,
                fault: fault.map(|FaultArg::UnmaskedConv| Fault::UnmaskedConv),
                ..VerifyConfig::default()
            };
            let mut tol = Tolerances::default();
            for t in &tolerances {
                tol.apply_override(t)?;
            }
            cfg.tolerances = tol;
            cfg.pui_batches = pui_batches.unwrap_or(cfg.pui_batches);
            cfg.gradient_instances = gradient_instances.unwrap_or(cfg.gradient_instances);
            cfg.scan_lanes = scan_lanes.unwrap_or(cfg.scan_lanes);
            cfg.isolation_trials = isolation_trials.unwrap_or(cfg.isolation_trials);
            verify_cmd(ctx, &cfg)
        }
        Command::Bench {
            count,
            min_len,
            max_len,
            target_mean,
            model,
            reps,
        } => {
            let spec = LengthDistributionSpec {
                kind: LengthKind::TruncatedLognormal { sigma: None },
                min_len,
                max_len,
                target_mean,
                sample_count: count,
                seed: ctx.seed,
            };
            bench_cmd(ctx, &spec, &model, reps)
        }
    }
}

#[derive(Serialize)]
struct LengthSummary {
    spec: LengthDistributionSpec,
    count: usize,
    mean: f64,
    min: usize,
    max: usize,
    lengths: Vec<usize>,
}

fn gen_lengths_cmd(ctx: &Ctx, args: &LengthArgs, output: Option<PathBuf>) -> Result<bool> {
    let (spec, lengths) = args.generate(ctx.seed)?;
    if let Some(path) = output {
        let text: String = lengths.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let summary = LengthSummary {
        count: lengths.len(),
        mean: lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64,
        min: lengths.iter().copied().min().unwrap_or(0),
        max: lengths.iter().copied().max().unwrap_or(0),
        spec,
        lengths,
    };
    let mut table = Table::new(vec!["length"]);
    for l in &summary.lengths {
        table.push(vec![l.to_string()]);
    }
    let preamble = vec![format!(
        "count {}  mean {:.2}  min {}  max {}",
        summary.count, summary.mean, summary.min, summary.max
    )];
    if ctx.format == Format::Text {
        // The full list is only useful in machine formats.
        println!("{}", preamble[0]);
        return Ok(true);
    }
    emit(ctx.format, &summary, &preamble, &table)?;
    Ok(true)
}

fn compare_cmd(ctx: &Ctx, args: &LengthArgs, model: &str) -> Result<bool> {
    let capacity = ctx.capacity.unwrap_or(4096);
    let (_, lengths) = args.generate(ctx.seed)?;
    let model = ctx.model(model)?;
    let rows = compare_strategies(&lengths, capacity, &model)?;
    let report = BenchReport {
        model,
        environment: ctx.environment(),
        rows,
    };
    let mut table = Table::new(vec![
        "strategy",
        "capacity",
        "packs",
        "tokens",
        "slots",
        "padding_rate",
        "total_flops",
        "flop_ratio",
        "wall_time_s",
    ]);
    for r in &report.rows {
        table.push(vec![
            r.strategy.name().into(),
            r.capacity.to_string(),
            r.num_packs.to_string(),
            r.tokens.to_string(),
            r.slots.to_string(),
            fixed(r.padding_rate, 6),
            r.total_flops.to_string(),
            fixed(r.flop_ratio_vs_padded, 6),
            sci(r.wall_time_seconds),
        ]);
    }
    let env = &report.environment;
    let preamble = vec![format!(
        "model {}  sequences {}  precision {}  threads {}  seed {}",
        report.model.name,
        lengths.len(),
        env.precision.name(),
        env.threads,
        env.seed
    )];
    emit(ctx.format, &report, &preamble, &table)?;
    Ok(true)
}

#[derive(Serialize)]
struct ProfileReport {
    environment: Environment,
    rows: Vec<seqpack_core::profile::ProfileRow>,
}

fn profile_cmd(
    ctx: &Ctx,
    sweep: Vec<usize>,
    max_len: usize,
    channels: usize,
    states: usize,
    reps: usize,
) -> Result<bool> {
    let sweep = if sweep.is_empty() {
        default_sweep(max_len)
    } else {
        sweep
    };
    let rows = profile_scan(&sweep, channels, states, ctx.precision, reps, ctx.seed)?;
    let mut table = Table::new(vec![
        "seqlen",
        "lanes",
        "reps",
        "median_s",
        "elements_per_s",
    ]);
    for r in &rows {
        table.push(vec![
            r.seqlen.to_string(),
            r.lanes.to_string(),
            r.repetitions.to_string(),
            sci(r.median_seconds),
            sci(r.elements_per_second),
        ]);
    }
    let report = ProfileReport {
        environment: ctx.environment(),
        rows,
    };
    emit(ctx.format, &report, &[], &table)?;
    Ok(true)
}

#[derive(Serialize)]
struct FlopRow {
    model: String,
    per_slot_layer: u128,
    strategy: String,
    slots: usize,
    padding_rate: f64,
    total_flops: u128,
    ratio_vs_padded: f64,
}

#[derive(Serialize)]
struct FlopReport {
    capacity: usize,
    sequences: usize,
    tokens: usize,
    rows: Vec<FlopRow>,
}

fn flops_cmd(ctx: &Ctx, args: &LengthArgs, names: Vec<String>) -> Result<bool> {
    let capacity = ctx.capacity.unwrap_or(4096);
    let (_, lengths) = args.generate(ctx.seed)?;
    let models: Vec<ModelConfig> = if names.is_empty() {
        match &ctx.models {
            Some(f) => f.models.clone(),
            None => builtin_presets(),
        }
    } else {
        names.iter().map(|n| ctx.model(n)).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for model in &models {
        for r in compare_strategies(&lengths, capacity, model)? {
            rows.push(FlopRow {
                model: model.name.clone(),
                per_slot_layer: model.per_slot_layer(),
                strategy: r.strategy.name().into(),
                slots: r.slots,
                padding_rate: r.padding_rate,
                total_flops: r.total_flops,
                ratio_vs_padded: r.flop_ratio_vs_padded,
            });
        }
    }
    let mut table = Table::new(vec![
        "model",
        "per_slot_layer",
        "strategy",
        "slots",
        "padding_rate",
        "total_flops",
        "ratio",
    ]);
    for r in &rows {
        table.push(vec![
            r.model.clone(),
            r.per_slot_layer.to_string(),
            r.strategy.clone(),
            r.slots.to_string(),
            fixed(r.padding_rate, 6),
            r.total_flops.to_string(),
            fixed(r.ratio_vs_padded, 6),
        ]);
    }
    let report = FlopReport {
        capacity,
        sequences: lengths.len(),
        tokens: lengths.iter().sum(),
        rows,
    };
    emit(ctx.format, &report, &[], &table)?;
    Ok(true)
}

fn verify_cmd(ctx: &Ctx, cfg: &VerifyConfig) -> Result<bool> {
    let report = run_verify(cfg)?;
    let mut table = Table::new(vec![
        "suite",
        "check",
        "precision",
        "cases",
        "tolerance",
        "worst",
        "result",
        "counterexample",
    ]);
    for c in &report.checks {
        let cx = c.counterexample.as_ref().map_or(String::new(), |x| {
            let loc = x.location.map_or(String::new(), |l| {
                format!(
                    " at sequence {} position {} channel {}",
                    l.sequence, l.position, l.channel
                )
            });
            format!("case {}{loc}: {}", x.case, x.detail)
        });
        table.push(vec![
            c.suite.name().into(),
            c.check.clone(),
            c.precision.map_or("-".into(), |p| p.name().into()),
            c.cases.to_string(),
            sci(c.tolerance),
            sci(c.worst),
            if c.passed { "pass" } else { "FAIL" }.into(),
            cx,
        ]);
    }
    let preamble = vec![format!(
        "verify {}  seed {}  {}",
        report.suite.name(),
        report.seed,
        if report.passed { "passed" } else { "FAILED" }
    )];
    emit(ctx.format, &report, &preamble, &table)?;
    Ok(report.passed)
}

#[derive(Serialize)]
struct ThroughputReport {
    model: ModelConfig,
    capacity: usize,
    environment: Environment,
    rows: Vec<ThroughputRow>,
}

fn bench_cmd(ctx: &Ctx, spec: &LengthDistributionSpec, model: &str, reps: usize) -> Result<bool> {
    let capacity = ctx.capacity.unwrap_or(spec.max_len);
    let lengths = gen_lengths(spec)?;
    let model = ctx.model(model)?;
    let rows = bench_forward_backward(
        &lengths,
        capacity,
        model.block_dims(),
        ctx.precision,
        reps,
        ctx.seed,
    )?;
    let mut table = Table::new(vec![
        "mode",
        "calls",
        "tokens",
        "slots",
        "median_s",
        "tokens_per_s",
    ]);
    for r in &rows {
        table.push(vec![
            serde_json::to_value(r.mode)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
            r.calls.to_string(),
            r.tokens.to_string(),
            r.slots.to_string(),
            sci(r.median_seconds),
            sci(r.tokens_per_second),
        ]);
    }
    let report = ThroughputReport {
        model,
        capacity,
        environment: ctx.environment(),
        rows,
    };
    emit(ctx.format, &report, &[], &table)?;
    Ok(true)
}
