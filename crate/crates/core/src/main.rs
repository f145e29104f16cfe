use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bitalloc::error::{Error, ErrorKind, Result};
use bitalloc::fixtures::{desk_fixture, two_layer_fixture};
use bitalloc::manifest::{load_manifest_with, write_bundle, Manifest, Overrides, PlanSection};
use bitalloc::perturbation::PerturbationTable;
use bitalloc::pipeline::{
    emit_reports, run_converge, run_pipeline_with, run_solve, run_table, RunReport, Solver,
    TABLE_FILE,
};
use bitalloc::validate::{emit_validation, run_validate};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "BITALLOC_THREADS";

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MANIFEST: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_BUDGET: u8 = 6;

#[derive(Parser)]
#[command(name = "bitalloc", version, about = "Sensitivity-driven mixed-precision bit-width allocation")]
struct Cli {
    /// Worker threads; overrides BITALLOC_THREADS. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full allocation and write every report.
    Plan {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SolverArg::Greedy)]
        solver: SolverArg,
    },
    /// Compute only the loss-perturbation table.
    Table {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Assign bit-widths from a previously written table.
    Solve {
        #[command(flatten)]
        run: RunArgs,
        /// Table CSV; defaults to perturbation.csv in the output directory.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SolverArg::Greedy)]
        solver: SolverArg,
    },
    /// Compare the proxies and the plan against exact computations.
    Validate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Tables on growing calibration prefixes.
    Converge {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic model, data and manifest.
    Fixture {
        #[arg(long, value_enum, default_value_t = FixtureKind::Desk)]
        kind: FixtureKind,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of data samples to generate.
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Greedy,
    Dp,
    Exhaustive,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Greedy => Solver::Greedy,
            SolverArg::Dp => Solver::Dp,
            SolverArg::Exhaustive => Solver::Exhaustive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Desk,
    TwoLayer,
}

/// Manifest path plus overrides for its fields.
#[derive(Args)]
struct RunArgs {
    /// Manifest file.
    manifest: PathBuf,
    /// Candidate bit-widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<u32>>,
    #[arg(long)]
    target_bits: Option<f64>,
    /// Calibration sample count.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// second-order, first-order, hessian-free or combined.
    #[arg(long)]
    proxy: Option<String>,
    /// Sum per-sample terms in a fixed order (the default).
    #[arg(long, conflicts_with = "nondeterministic")]
    deterministic: bool,
    /// Allow a faster reduction whose rounding depends on scheduling.
    #[arg(long)]
    nondeterministic: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Convergence checkpoints (sample counts), comma separated.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<usize>>,
    /// Calibration inputs file.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Calibration labels file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

fn absolute(p: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.as_ref()
        .map(|p| std::path::absolute(p).map_err(|e| Error::io(p, e)))
        .transpose()
}

impl RunArgs {
    fn load(&self) -> Result<Manifest> {
        let overrides = Overrides {
            bits: self.bits.clone(),
            target_bits: self.target_bits,
            samples: self.samples,
            seed: self.seed,
            proxy: self.proxy.clone(),
            deterministic: match (self.deterministic, self.nondeterministic) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
            output_dir: absolute(&self.output_dir)?,
            checkpoints: self.checkpoints.clone(),
            inputs: absolute(&self.inputs)?,
            labels: absolute(&self.labels)?,
        };
        load_manifest_with(&self.manifest, &overrides)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Manifest => EXIT_MANIFEST,
        ErrorKind::Infeasible => EXIT_INFEASIBLE,
        ErrorKind::Numeric => EXIT_NUMERIC,
        ErrorKind::Budget => EXIT_BUDGET,
        ErrorKind::Io => EXIT_OTHER,
    }
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("{THREADS_ENV}={v:?} is not a thread count"))?,
            Err(_) => return Ok(None),
        },
    };
    if n == 0 {
        return Err("thread count must be at least 1".into());
    }
    Ok(Some(n))
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn print_assignment(report: &RunReport) {
    let Some(a) = &report.assignment else { return };
    println!("{:<24} {:>4} {:>10} {:>14}", "layer", "bit", "params", "delta_loss");
    for l in &a.layers {
        println!("{:<24} {:>4} {:>10} {:>14.6e}", l.name, l.bit, l.params, l.delta_loss);
    }
    println!(
        "avg_bits {:.4} (target {}), used {} of {} bits, w_ratio {:.3}, total delta_loss {:.6e}",
        a.avg_bits, report.target_bits, a.used_bits, a.capacity_bits, a.w_ratio, a.total_delta_loss
    );
}

fn finish(report: &RunReport, dir: &Path) -> Result<()> {
    print_assignment(report);
    print_written(&emit_reports(report, dir)?);
    Ok(())
}

fn load_table(path: &Path, m: &Manifest) -> Result<PerturbationTable> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    PerturbationTable::read_csv(f, m.plan().samples, m.proxy())
        .map(|t| t.with_seed(Some(m.plan().seed)))
}

fn write_fixture(kind: FixtureKind, out: &Path, samples: usize, seed: u64) -> Result<()> {
    let (net, data, plan) = match kind {
        FixtureKind::Desk => {
            let (net, data) = desk_fixture(seed, samples)?;
            let mut plan = PlanSection::new((1..=8).collect(), 4.0);
            plan.samples = samples.min(plan.samples);
            (net, data, plan)
        }
        FixtureKind::TwoLayer => {
            let (net, data) = two_layer_fixture(seed, samples)?;
            let mut plan = PlanSection::new(vec![2, 4, 8], 3.0);
            plan.samples = samples.min(plan.samples);
            (net, data, plan)
        }
    };
    let path = write_bundle(out, &net, &data, plan)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Plan { run, solver } => {
            let m = run.load()?;
            let report = run_pipeline_with(&m, solver.into())?;
            finish(&report, m.output_dir())
        }
        Command::Table { run } => {
            let m = run.load()?;
            finish(&run_table(&m)?, m.output_dir())
        }
        Command::Solve { run, table, solver } => {
            let m = run.load()?;
            let path = match &table {
                Some(p) => p.clone(),
                None => m.output_dir().join(TABLE_FILE),
            };
            let t = load_table(&path, &m)?;
            finish(&run_solve(&m, t, solver.into())?, m.output_dir())
        }
        Command::Validate { run } => {
            let m = run.load()?;
            let report = run_validate(&m)?;
            for p in &report.proxies {
                match p.pooled_spearman {
                    Some(r) => println!("{:<14} spearman {r:.4}", p.proxy),
                    None => println!("{:<14} spearman undefined", p.proxy),
                }
            }
            if let Some(id) = &report.identity {
                println!("gauss-newton identity max rel error {:.3e}", id.max_rel_error);
            }
            println!(
                "assignment delta_loss predicted {:.6e} exact {:.6e}",
                report.assignment.predicted_delta_loss, report.assignment.exact_delta_loss
            );
            print_written(&emit_validation(&report, m.output_dir())?);
            Ok(())
        }
        Command::Converge { run } => {
            let m = run.load()?;
            let report = run_converge(&m)?;
            print_written(&emit_reports(&report, m.output_dir())?);
            Ok(())
        }
        Command::Fixture {
            kind,
            out,
            samples,
            seed,
        } => write_fixture(kind, &out, samples, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match thread_count(cli.threads) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: cannot start thread pool: {e}");
                return ExitCode::from(EXIT_OTHER);
            }
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
