//! End-to-end allocation runs and their report files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifest::{write_file, Manifest, ManifestFile};
use crate::mckp::{build_instance, dominance_filter, dp_exact, exhaustive, greedy_assign, BitAssignment};
use crate::perturbation::{
    calibration_subset, convergence_profile, format_f64, perturbation_table_with,
    PerturbationTable, QuantDeltas, StreamOptions,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const ASSIGNMENT_FILE: &str = "assignment.toml";
pub const TABLE_FILE: &str = "perturbation.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const TIMING_FILE: &str = "timing.toml";
pub const MANIFEST_ECHO_FILE: &str = "manifest.toml";

const STEP_DELTAS: &str = "step 1 (quantization errors)";
const STEP_TABLE: &str = "step 2 (loss perturbation)";
const STEP_FILTER: &str = "step 3.1 (dominance filter)";
const STEP_ASSIGN: &str = "step 3.2 (bit assignment)";
const STEP_PROFILE: &str = "convergence profile";

/// Which knapsack solver produces the assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    Greedy,
    Dp,
    Exhaustive,
}

impl Solver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Solver::Greedy => "greedy",
            Solver::Dp => "dp",
            Solver::Exhaustive => "exhaustive",
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Solver::Greedy, Solver::Dp, Solver::Exhaustive]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::manifest("solver", format!("unknown solver `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTiming {
    pub step: String,
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Timings(Vec<StepTiming>);

impl Timings {
    fn time<T>(&mut self, step: &str, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push(StepTiming {
            step: step.to_string(),
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn steps(&self) -> &[StepTiming] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|s| s.seconds).sum()
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub assignment: Option<BitAssignment>,
    pub table: PerturbationTable,
    pub convergence: Option<Vec<(usize, PerturbationTable)>>,
    pub timing: Timings,
    pub solver: Solver,
    pub target_bits: f64,
    pub version: &'static str,
    pub manifest: ManifestFile,
}

fn layer_sizes(m: &Manifest) -> HashMap<String, u64> {
    m.net()
        .weighted_layers()
        .map(|l| (l.name().to_string(), l.param_count() as u64))
        .collect()
}

/// Steps 1 and 2: quantization errors, then the loss-perturbation table on
/// the seeded calibration subset.
pub fn compute_table(m: &Manifest, timing: &mut Timings) -> Result<PerturbationTable> {
    let plan = m.plan();
    let deltas = timing
        .time("1", "quantization errors", || QuantDeltas::compute(m.net(), &m.bits()))
        .map_err(|e| e.in_step(STEP_DELTAS))?;
    timing
        .time("2", "loss perturbation", || {
            let calib = calibration_subset(m.samples(), plan.samples, Some(plan.seed))?;
            let opts = StreamOptions {
                deterministic: plan.deterministic,
            };
            perturbation_table_with(m.net(), &calib, &deltas, m.proxy(), opts)
        })
        .map(|t| t.with_seed(Some(plan.seed)))
        .map_err(|e| e.in_step(STEP_TABLE))
}

/// Steps 3.1 and 3.2 on an existing table.
pub fn solve_table(
    m: &Manifest,
    table: &PerturbationTable,
    solver: Solver,
    timing: &mut Timings,
) -> Result<BitAssignment> {
    if table.layers() != m.net().weighted_names().as_slice() {
        return Err(Error::Table(format!(
            "table layers {:?} do not match the model's weighted layers {:?}",
            table.layers(),
            m.net().weighted_names()
        ))
        .in_step(STEP_FILTER));
    }
    let filtered = timing
        .time("3.1", "dominance filter", || {
            build_instance(table, &layer_sizes(m), m.plan().target_bits).map(|i| dominance_filter(&i))
        })
        .map_err(|e| e.in_step(STEP_FILTER))?;
    timing
        .time("3.2", "bit assignment", || match solver {
            Solver::Greedy => greedy_assign(&filtered),
            Solver::Dp => dp_exact(&filtered),
            Solver::Exhaustive => exhaustive(&filtered),
        })
        .map_err(|e| e.in_step(STEP_ASSIGN))
}

/// Tables on nested prefixes of the seeded calibration order.
pub fn compute_profile(
    m: &Manifest,
    checkpoints: &[usize],
    timing: &mut Timings,
) -> Result<Vec<(usize, PerturbationTable)>> {
    timing
        .time("profile", "convergence profile", || {
            convergence_profile(
                m.net(),
                m.samples(),
                &m.bits(),
                checkpoints,
                m.proxy(),
                Some(m.plan().seed),
            )
        })
        .map_err(|e| e.in_step(STEP_PROFILE))
}

fn report(m: &Manifest, table: PerturbationTable, timing: Timings, solver: Solver) -> RunReport {
    RunReport {
        assignment: None,
        table,
        convergence: None,
        timing,
        solver,
        target_bits: m.plan().target_bits,
        version: VERSION,
        manifest: m.file().clone(),
    }
}

/// The full allocation: steps 1, 2, 3.1 and 3.2, plus a convergence profile
/// when the manifest lists checkpoints.
pub fn run_pipeline(m: &Manifest) -> Result<RunReport> {
    run_pipeline_with(m, Solver::Greedy)
}

pub fn run_pipeline_with(m: &Manifest, solver: Solver) -> Result<RunReport> {
    let mut timing = Timings::default();
    let table = compute_table(m, &mut timing)?;
    let assignment = solve_table(m, &table, solver, &mut timing)?;
    let convergence = match &m.plan().checkpoints {
        Some(cps) => Some(compute_profile(m, cps, &mut timing)?),
        None => None,
    };
    Ok(RunReport {
        assignment: Some(assignment),
        convergence,
        ..report(m, table, timing, solver)
    })
}

/// Steps 1 and 2 only.
pub fn run_table(m: &Manifest) -> Result<RunReport> {
    let mut timing = Timings::default();
    let table = compute_table(m, &mut timing)?;
    Ok(report(m, table, timing, Solver::Greedy))
}

/// Steps 3.1 and 3.2 on a table loaded from disk.
pub fn run_solve(m: &Manifest, table: PerturbationTable, solver: Solver) -> Result<RunReport> {
    let mut timing = Timings::default();
    let assignment = solve_table(m, &table, solver, &mut timing)?;
    Ok(RunReport {
        assignment: Some(assignment),
        ..report(m, table, timing, solver)
    })
}

/// Convergence profile at the manifest's checkpoints; the table of the
/// largest checkpoint is reported as the main one.
pub fn run_converge(m: &Manifest) -> Result<RunReport> {
    let cps = m.plan().checkpoints.clone().ok_or_else(|| {
        Error::manifest("plan.checkpoints", "required for a convergence profile")
    })?;
    let mut timing = Timings::default();
    let profile = compute_profile(m, &cps, &mut timing)?;
    let table = profile.last().unwrap().1.clone();
    Ok(RunReport {
        convergence: Some(profile),
        ..report(m, table, timing, Solver::Greedy)
    })
}

#[derive(Serialize)]
struct AssignmentDoc<'a> {
    run: RunMeta<'a>,
    layers: Vec<LayerDoc<'a>>,
    totals: Totals,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: &'a str,
    proxy: &'a str,
    solver: &'a str,
    samples: usize,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct LayerDoc<'a> {
    name: &'a str,
    bit: u32,
    params: u64,
    delta_loss: f64,
}

#[derive(Serialize)]
struct Totals {
    target_bits: f64,
    avg_bits: f64,
    capacity_bits: u64,
    used_bits: u64,
    w_ratio: f64,
    total_delta_loss: f64,
}

#[derive(Serialize)]
struct TimingDoc<'a> {
    version: &'a str,
    total_seconds: f64,
    steps: &'a [StepTiming],
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Table(format!("cannot serialize report: {e}")))
}

/// Text of the assignment report.
pub fn assignment_toml(report: &RunReport, a: &BitAssignment) -> Result<String> {
    let doc = AssignmentDoc {
        run: RunMeta {
            version: report.version,
            proxy: report.table.proxy().as_str(),
            solver: report.solver.as_str(),
            samples: report.table.samples(),
            seed: report.table.seed(),
        },
        layers: a
            .layers
            .iter()
            .map(|l| LayerDoc {
                name: &l.name,
                bit: l.bit,
                params: l.params,
                delta_loss: l.delta_loss,
            })
            .collect(),
        totals: Totals {
            target_bits: report.target_bits,
            avg_bits: a.avg_bits,
            capacity_bits: a.capacity_bits,
            used_bits: a.used_bits,
            w_ratio: a.w_ratio,
            total_delta_loss: a.total_delta_loss,
        },
    };
    to_toml(&doc)
}

fn convergence_csv(profile: &[(usize, PerturbationTable)]) -> Result<Vec<u8>> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["samples", "layer", "bit", "delta_loss"])?;
    for (n, table) in profile {
        for (layer, bit, v) in table.iter() {
            out.write_record([n.to_string().as_str(), layer, &bit.to_string(), &format_f64(v)])?;
        }
    }
    out.into_inner()
        .map_err(|e| Error::Table(format!("cannot write convergence csv: {e}")))
}

/// Writes the report files into `dir`: the assignment (when solved), the
/// perturbation table, the convergence profile (when computed), timings
/// and the resolved manifest. Returns the paths written.
pub fn emit_reports(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    if let Some(a) = &report.assignment {
        put(ASSIGNMENT_FILE, assignment_toml(report, a)?.as_bytes())?;
    }
    let mut table = Vec::new();
    report.table.write_csv(&mut table)?;
    put(TABLE_FILE, &table)?;
    if let Some(profile) = &report.convergence {
        put(CONVERGENCE_FILE, &convergence_csv(profile)?)?;
    }
    let timing = TimingDoc {
        version: report.version,
        total_seconds: report.timing.total(),
        steps: report.timing.steps(),
    };
    put(TIMING_FILE, to_toml(&timing)?.as_bytes())?;
    put(MANIFEST_ECHO_FILE, report.manifest.to_toml()?.as_bytes())?;
    Ok(written)
}
