//! Oracle comparisons for a manifest's model: how well each proxy ranks
//! single-layer quantization damage, whether the streamed table matches the
//! Jacobian-based quadratic form, and how the planned assignment's predicted
//! loss change compares with the real one.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifest::{write_file, Manifest};
use crate::mckp::BitAssignment;
use crate::oracle::{exact_loss_perturbation, ggn_reference, ranking_fidelity_many, RankingReport};
use crate::perturbation::{calibration_subset, perturbation_table, ProxyKind, QuantDeltas, StreamOptions};
use crate::pipeline::{compute_table, solve_table, Solver, Timings, VERSION};

/// Samples used for the Jacobian-based identity check, which costs one
/// backward pass per class per sample per (layer, bit).
pub const IDENTITY_SAMPLES: usize = 64;

pub const VALIDATION_FILE: &str = "validation.toml";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitCorrelation {
    pub bit: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProxySummary {
    pub proxy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_spearman: Option<f64>,
    pub per_bit: Vec<BitCorrelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub samples: usize,
    pub pairs: usize,
    /// Largest `|table - reference| / |reference|` over (layer, bit) pairs.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentCheck {
    pub bits: Vec<u32>,
    pub predicted_delta_loss: f64,
    pub exact_delta_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub version: &'static str,
    pub samples: usize,
    pub seed: u64,
    pub proxies: Vec<ProxySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityCheck>,
    pub assignment: AssignmentCheck,
    #[serde(skip)]
    pub rankings: Vec<RankingReport>,
}

fn summarize(r: &RankingReport) -> ProxySummary {
    ProxySummary {
        proxy: r.proxy.as_str().to_string(),
        pooled_spearman: r.pooled,
        per_bit: r
            .per_bit
            .iter()
            .map(|&(bit, spearman)| BitCorrelation { bit, spearman })
            .collect(),
    }
}

fn identity_check(m: &Manifest, calib: &[crate::net::Sample]) -> Result<Option<IdentityCheck>> {
    let net = m.net();
    if net.param_count() * net.classes() > crate::oracle::JACOBIAN_ENTRY_BUDGET {
        return Ok(None);
    }
    let subset = &calib[..calib.len().min(IDENTITY_SAMPLES)];
    let bits = m.bits();
    let deltas = QuantDeltas::compute(net, &bits)?;
    let table = perturbation_table(net, subset, &bits, ProxyKind::SecondOrder, StreamOptions::default())?;
    let mut worst: f64 = 0.0;
    for l in 0..deltas.layers().len() {
        for j in 0..bits.len() {
            let dw = deltas.single_layer(net, l, j);
            let reference = ggn_reference(net, subset, &dw)?;
            let got = table.row(l)[j];
            let err = (got - reference).abs();
            worst = worst.max(if reference != 0.0 { err / reference.abs() } else { err });
        }
    }
    Ok(Some(IdentityCheck {
        samples: subset.len(),
        pairs: deltas.layers().len() * bits.len(),
        max_rel_error: worst,
    }))
}

fn assignment_check(m: &Manifest, calib: &[crate::net::Sample], a: &BitAssignment) -> Result<AssignmentCheck> {
    let pairs: Vec<(String, u32)> = a.layers.iter().map(|l| (l.name.clone(), l.bit)).collect();
    Ok(AssignmentCheck {
        bits: a.bits(),
        predicted_delta_loss: a.total_delta_loss,
        exact_delta_loss: exact_loss_perturbation(m.net(), calib, &pairs)?,
    })
}

/// Runs every comparison on the manifest's calibration subset.
pub fn run_validate(m: &Manifest) -> Result<ValidationReport> {
    let plan = m.plan();
    let calib = calibration_subset(m.samples(), plan.samples, Some(plan.seed))?;
    let rankings = ranking_fidelity_many(m.net(), &calib, &m.bits(), &ProxyKind::ALL)
        .map_err(|e| e.in_step("ranking fidelity"))?;
    let identity = identity_check(m, &calib).map_err(|e| e.in_step("Gauss-Newton identity"))?;
    let mut timing = Timings::default();
    let table = compute_table(m, &mut timing)?;
    let a = solve_table(m, &table, Solver::Greedy, &mut timing)?;
    let assignment = assignment_check(m, &calib, &a).map_err(|e| e.in_step("exact loss change"))?;
    Ok(ValidationReport {
        version: VERSION,
        samples: calib.len(),
        seed: plan.seed,
        proxies: rankings.iter().map(summarize).collect(),
        identity,
        assignment,
        rankings,
    })
}

/// Writes `validation.toml` and one `ranking-<proxy>.csv` per proxy.
pub fn emit_validation(report: &ValidationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let text = toml::to_string(report)
        .map_err(|e| Error::Table(format!("cannot serialize validation report: {e}")))?;
    let path = dir.join(VALIDATION_FILE);
    write_file(&path, text.as_bytes())?;
    written.push(path);
    for r in &report.rankings {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        let path = dir.join(format!("ranking-{}.csv", r.proxy.as_str()));
        write_file(&path, &buf)?;
        written.push(path);
    }
    Ok(written)
}
