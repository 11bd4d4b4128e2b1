use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fpcost::harness::{self, CompareOptions, ExperimentMatrix, MatrixOptions, RunContext};
use fpcost::hwinfo::{self, FeatureSet};
use fpcost::kernels::{self, KernelSpec, Variant};
use fpcost::report::{self, Format, RenderSpec};
use fpcost::{fpenv, EnvMode, Error, FpEnvConfig, OperationKind, OutcomeClass, ReferenceTable};

#[derive(Parser)]
#[command(
    name = "fpcost",
    version,
    about = "Cycle cost of AVX double-precision operations on special operands"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment matrix and write one JSON record per cell.
    Run(RunArgs),
    /// Compare results against a reference machine.
    Compare(CompareArgs),
    /// Render results as a table.
    Render(RenderArgs),
    /// Print the instruction sequence of each kernel.
    DumpKernels(DumpArgs),
    /// Decode the MXCSR register and show detected features.
    EnvCheck(EnvCheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvChoice {
    Both,
    Fd,
    NoFd,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantChoice {
    All,
    C,
    Asm,
}

impl VariantChoice {
    fn variants(self) -> Vec<Variant> {
        match self {
            VariantChoice::All => vec![Variant::MemC, Variant::RegAsm],
            VariantChoice::C => vec![Variant::MemC],
            VariantChoice::Asm => vec![Variant::RegAsm],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatChoice {
    Md,
    Csv,
    Json,
}

impl From<FormatChoice> for Format {
    fn from(f: FormatChoice) -> Format {
        match f {
            FormatChoice::Md => Format::Markdown,
            FormatChoice::Csv => Format::Csv,
            FormatChoice::Json => Format::Json,
        }
    }
}

fn parse_op(s: &str) -> Result<OperationKind, String> {
    s.parse()
}

fn parse_class(s: &str) -> Result<OutcomeClass, String> {
    s.parse()
}

#[derive(Args)]
struct EnvArgs {
    /// Enable flush-to-zero; with --daz or alone, runs that single setting.
    #[arg(long)]
    ftz: bool,
    /// Enable denormals-are-zero.
    #[arg(long)]
    daz: bool,
    /// Standard environments to run when neither --ftz nor --daz is given.
    #[arg(long, value_enum, default_value = "both", conflicts_with_all = ["ftz", "daz"])]
    env: EnvChoice,
}

impl EnvArgs {
    fn configs(&self) -> Vec<FpEnvConfig> {
        if self.ftz || self.daz {
            return vec![FpEnvConfig::with_flush_modes(self.ftz, self.daz)];
        }
        match self.env {
            EnvChoice::Both => EnvMode::BOTH.iter().map(|m| m.config()).collect(),
            EnvChoice::Fd => vec![FpEnvConfig::FTZ_DAZ],
            EnvChoice::NoFd => vec![FpEnvConfig::GRADUAL],
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Operations to run, comma separated (add, mul, div, fma).
    #[arg(long, value_delimiter = ',', value_parser = parse_op)]
    ops: Vec<OperationKind>,
    /// Outcome classes to run, comma separated (e.g. normalized,underflow).
    #[arg(long, value_delimiter = ',', value_parser = parse_class)]
    classes: Vec<OutcomeClass>,
    #[arg(long, value_enum, default_value = "all")]
    variant: VariantChoice,
    /// Timed samples per cell.
    #[arg(long, default_value_t = 9)]
    samples: usize,
    /// Discarded warm-up samples per cell.
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    /// Minimum scalar operations per sample.
    #[arg(long, default_value_t = kernels::DEFAULT_SCALAR_OP_FLOOR)]
    scalar_ops: u64,
    /// Core to pin the measurement thread to.
    #[arg(long, default_value_t = 0)]
    core: usize,
    /// Length of each TSC calibration window in milliseconds; 0 skips calibration.
    #[arg(long, default_value_t = 200)]
    calibrate_ms: u64,
    /// Add the cells that have no reference values.
    #[arg(long)]
    extended: bool,
    /// Run the cells in a seeded random order.
    #[arg(long)]
    shuffle: bool,
    /// Seed for lane perturbation and shuffling.
    #[arg(long, default_value_t = fpcost::fpmodel::DEFAULT_SEED)]
    seed: u64,
    /// Output file for the JSON Lines records; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-cell progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// JSON Lines results; stdin when absent.
    results: Option<PathBuf>,
    /// Reference data file; the bundled table when absent.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Reference machine key; the host's own microarchitecture when known.
    #[arg(long)]
    machine: Option<String>,
    /// Penalty ratios within this factor count as a match.
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
    /// Also compare absolute cycles.
    #[arg(long)]
    absolute: bool,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatChoice,
    #[arg(long, default_value_t = 2)]
    precision: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// JSON Lines results; stdin when absent.
    results: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatChoice,
    #[arg(long, default_value_t = 2)]
    precision: usize,
    /// Environment columns, comma separated (fd, no-fd); all present when absent.
    #[arg(long, value_delimiter = ',', value_enum)]
    columns: Vec<ColumnChoice>,
    /// Append host and calibration details.
    #[arg(long)]
    provenance: bool,
    /// Report the cost of a full 4-wide instruction.
    #[arg(long)]
    per_instruction: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColumnChoice {
    Fd,
    NoFd,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_op)]
    ops: Vec<OperationKind>,
    #[arg(long, value_enum, default_value = "all")]
    variant: VariantChoice,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnvCheckArgs {
    #[arg(long)]
    ftz: bool,
    #[arg(long)]
    daz: bool,
}

fn write_output(out: Option<&Path>, text: &str) -> fpcost::Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_input(path: Option<&Path>) -> fpcost::Result<String> {
    match path {
        Some(p) => Ok(fs::read_to_string(p)?),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn host_features() -> fpcost::Result<FeatureSet> {
    let f = hwinfo::detect_features()?;
    if !f.avx {
        return Err(Error::UnsupportedHost(format!("{} has no AVX", f.model_name)));
    }
    Ok(f)
}

fn run(args: RunArgs) -> fpcost::Result<()> {
    let features = host_features()?;
    let mut options = MatrixOptions {
        envs: args.env.configs(),
        ops: args.ops,
        classes: args.classes,
        variants: args.variant.variants(),
        extended: args.extended,
        shuffle: args.shuffle,
        seed: args.seed,
        ..MatrixOptions::default()
    };
    options.params.measure.samples = args.samples;
    options.params.measure.warmups = args.warmups;
    options.params.measure.validate()?;
    options.params.scalar_op_floor = args.scalar_ops;
    let matrix = ExperimentMatrix::build(&features, &options);
    if matrix.cells.is_empty() {
        return Err(Error::InvalidKernel("the selection matches no cells".into()));
    }

    let pin = hwinfo::pin_to_core(args.core)?;
    let calibration = match args.calibrate_ms {
        0 => None,
        ms => Some(hwinfo::calibrate_tsc(Duration::from_millis(ms))?),
    };
    let ctx = RunContext {
        features,
        calibration,
        pinned_core: Some(args.core),
    };
    let total = matrix.cells.len();
    let quiet = args.quiet;
    let records = harness::run_matrix_with(&matrix, &ctx, |i, r| {
        if quiet {
            return;
        }
        let value = match (&r.error, r.cycles) {
            (Some(e), _) => format!("error: {e}"),
            (None, Some(c)) => format!("{c:.3}"),
            (None, None) => "no value".into(),
        };
        eprintln!(
            "[{:>3}/{total}] {:<4} {:<18} {:<8} {:<3} {value}",
            i + 1,
            r.cell.op.name(),
            r.cell.outcome.name(),
            r.cell.env.label(),
            r.cell.variant.label()
        );
    })?;
    pin.restore()?;
    write_output(args.out.as_deref(), &harness::write_records(&records)?)
}

fn compare(args: CompareArgs) -> fpcost::Result<()> {
    let records = harness::read_records(&read_input(args.results.as_deref())?)?;
    if records.is_empty() {
        return Err(Error::EmptyResults);
    }
    let table = match &args.reference {
        Some(p) => ReferenceTable::load(p)?,
        None => ReferenceTable::bundled(),
    };
    let machine = args
        .machine
        .clone()
        .or_else(|| records[0].features.reference_machine().map(str::to_string));
    let opts = CompareOptions {
        factor: args.factor,
        absolute: args.absolute,
    };
    let report = match machine {
        Some(m) => match harness::compare_reference(&records, &table, &m, opts) {
            Ok(r) => r,
            Err(e @ Error::UnknownMachine(_)) => {
                eprintln!(
                    "warning: {e}; comparing penalty ratios only (known: {})",
                    table.machine_keys().join(", ")
                );
                harness::compare_ratios_only(&records)
            }
            Err(e) => return Err(e),
        },
        None => harness::compare_ratios_only(&records),
    };
    let spec = RenderSpec {
        precision: args.precision,
        ..RenderSpec::new(args.format.into())
    };
    let mut text = report::render_deviation(&report, &spec)?;
    if spec.format == Format::Markdown {
        text.push('\n');
        text.push_str(&report::summarize(&report));
    }
    write_output(args.out.as_deref(), &text)
}

fn render(args: RenderArgs) -> fpcost::Result<()> {
    let records = harness::read_records(&read_input(args.results.as_deref())?)?;
    let columns = if args.columns.is_empty() {
        RenderSpec::columns_of(&records)
    } else {
        args.columns
            .iter()
            .map(|c| match c {
                ColumnChoice::Fd => FpEnvConfig::FTZ_DAZ,
                ColumnChoice::NoFd => FpEnvConfig::GRADUAL,
            })
            .collect()
    };
    let spec = RenderSpec {
        format: args.format.into(),
        columns,
        precision: args.precision,
        include_provenance: args.provenance,
        per_instruction: args.per_instruction,
    };
    write_output(args.out.as_deref(), &report::render(&records, &spec)?)
}

fn dump_kernels(args: DumpArgs) -> fpcost::Result<()> {
    let ops = if args.ops.is_empty() {
        OperationKind::ALL.to_vec()
    } else {
        args.ops
    };
    let mut text = String::new();
    for op in ops {
        for variant in args.variant.variants() {
            let specs: Vec<KernelSpec> = match variant {
                Variant::RegAsm => kernels::regasm::supported_unrolls(op)
                    .iter()
                    .map(|&u| KernelSpec::reg_asm_unrolled(op, u))
                    .collect(),
                Variant::MemC => vec![KernelSpec::mem_c(op, kernels::DEFAULT_MEMC_VECTOR_LENGTH)],
            };
            for spec in specs {
                text.push_str(&kernels::dump_kernel(&spec)?);
                text.push('\n');
            }
        }
    }
    write_output(args.out.as_deref(), &text)
}

fn describe(raw: u32) -> String {
    let cfg = FpEnvConfig::decode(raw);
    format!(
        "mxcsr={raw:#06x} ftz={} daz={} underflow_masked={} all_masked={} rounding={} flags={:#04x} ({})",
        cfg.ftz as u8,
        cfg.daz as u8,
        cfg.underflow_masked as u8,
        cfg.mask_all_exceptions as u8,
        (raw & fpenv::ROUNDING_CONTROL) >> 13,
        raw & fpenv::STATUS_FLAGS,
        cfg.label()
    )
}

fn env_check(args: EnvCheckArgs) -> fpcost::Result<()> {
    let f = hwinfo::detect_features()?;
    println!(
        "cpu: {} ({}, family {:#x} model {:#x})",
        f.model_name, f.vendor, f.family, f.model
    );
    println!(
        "avx={} avx2={} fma3={} fma4={} invariant_tsc={} reference={}",
        f.avx,
        f.avx2,
        f.fma3,
        f.fma4,
        f.invariant_tsc,
        f.reference_machine().unwrap_or("none")
    );
    println!("current: {}", describe(fpenv::read_raw()?));
    if args.ftz || args.daz {
        let cfg = FpEnvConfig::with_flush_modes(args.ftz, args.daz);
        let applied = fpenv::with_env(cfg, fpenv::read_raw)??;
        println!("applied: {}", describe(applied));
        println!("restored: {}", describe(fpenv::read_raw()?));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Render(a) => render(a),
        Command::DumpKernels(a) => dump_kernels(a),
        Command::EnvCheck(a) => env_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::UnsupportedHost(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
