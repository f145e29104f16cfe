//! Ground-truth computations for checking the sensitivity proxies on small
//! networks: the true loss change under quantization, a finite-difference
//! Hessian, and the Gauss-Newton quadratic form built from full output
//! Jacobians.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{NetworkSpec, Sample, WeightSet};
use crate::perturbation::{format_f64, perturbation_table, ProxyKind, StreamOptions};
use crate::quantizer::{quantize_mse, Signedness};

/// Largest parameter count for which dense Hessians are materialized.
pub const HESSIAN_PARAM_BUDGET: usize = 500;
/// Largest `classes * params` Jacobian materialized per sample.
pub const JACOBIAN_ENTRY_BUDGET: usize = 4_000_000;
/// Central-difference step for Hessian columns.
pub const FD_STEP: f64 = 1e-3;

/// A network with some weighted layers replaced by their quantized values.
#[derive(Debug, Clone)]
pub struct QuantizedNetView<'a> {
    base: &'a NetworkSpec,
    assignment: Vec<(String, u32)>,
    weights: WeightSet,
}

impl<'a> QuantizedNetView<'a> {
    /// Layers missing from `assignment` keep full precision.
    pub fn new(base: &'a NetworkSpec, assignment: &[(String, u32)]) -> Result<Self> {
        let names = base.weighted_names();
        let mut weights = base.weight_set();
        for (i, (layer, bit)) in assignment.iter().enumerate() {
            if assignment[..i].iter().any(|(l, _)| l == layer) {
                return Err(Error::Table(format!("layer `{layer}` assigned twice")));
            }
            let ord = names
                .iter()
                .position(|n| n == layer)
                .ok_or_else(|| Error::Table(format!("no weighted layer named `{layer}`")))?;
            let q = quantize_mse(weights.block(ord), *bit, Signedness::Signed)?;
            *weights.block_mut(ord) = q.values;
        }
        Ok(QuantizedNetView {
            base,
            assignment: assignment.to_vec(),
            weights,
        })
    }

    pub fn base(&self) -> &NetworkSpec {
        self.base
    }

    pub fn assignment(&self) -> &[(String, u32)] {
        &self.assignment
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }
}

/// `mean_loss(quantized) - mean_loss(original)`.
pub fn exact_loss_perturbation(
    net: &NetworkSpec,
    samples: &[Sample],
    assignment: &[(String, u32)],
) -> Result<f64> {
    let view = QuantizedNetView::new(net, assignment)?;
    let base = net.mean_loss_with(&net.weight_set(), samples)?;
    let quant = net.mean_loss_with(view.weights(), samples)?;
    Ok(quant - base)
}

fn check_hessian_budget(net: &NetworkSpec) -> Result<usize> {
    let d = net.param_count();
    if d > HESSIAN_PARAM_BUDGET {
        return Err(Error::Budget {
            what: "dense Hessian",
            required: d as u128,
            limit: HESSIAN_PARAM_BUDGET as u128,
            advice: "use a smaller network",
        });
    }
    Ok(d)
}

/// Symmetrized central-difference Hessian of the mean loss.
#[derive(Debug, Clone)]
pub struct FdHessian {
    pub dim: usize,
    /// Row-major `dim x dim`, symmetrized as `(H + H^T) / 2`.
    pub matrix: Vec<f64>,
    /// `||H - H^T||_F / ||H||_F` before symmetrization.
    pub asymmetry: f64,
}

impl FdHessian {
    /// `1/2 v^T H v`
    pub fn half_quadratic(&self, v: &[f64]) -> f64 {
        half_quadratic(&self.matrix, self.dim, v)
    }
}

fn half_quadratic(m: &[f64], dim: usize, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..dim {
        if v[i] == 0.0 {
            continue;
        }
        let row: f64 = m[i * dim..(i + 1) * dim].iter().zip(v).map(|(a, b)| a * b).sum();
        acc += v[i] * row;
    }
    0.5 * acc
}

pub fn fd_hessian(net: &NetworkSpec, samples: &[Sample]) -> Result<FdHessian> {
    let d = check_hessian_budget(net)?;
    let w = net.weight_set().flatten();
    let base = net.weight_set();
    let columns = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[j] += FD_STEP;
            minus[j] -= FD_STEP;
            let gp = net.mean_grad_with(&base.split_like(&plus)?, samples)?.flatten();
            let gm = net.mean_grad_with(&base.split_like(&minus)?, samples)?.flatten();
            Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * FD_STEP)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut raw = vec![0.0; d * d];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            raw[i * d + j] = v;
        }
    }
    let (mut diff, mut norm) = (0.0, 0.0);
    let mut matrix = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let (a, b) = (raw[i * d + j], raw[j * d + i]);
            diff += (a - b) * (a - b);
            norm += a * a;
            matrix[i * d + j] = 0.5 * (a + b);
        }
    }
    Ok(FdHessian {
        dim: d,
        matrix,
        asymmetry: if norm > 0.0 { (diff / norm).sqrt() } else { 0.0 },
    })
}

/// `1/2 dw^T H dw` with `H` the finite-difference Hessian of the mean loss.
pub fn exact_hessian_quadratic(net: &NetworkSpec, samples: &[Sample], dw: &[f64]) -> Result<f64> {
    let h = fd_hessian(net, samples)?;
    check_len(net, dw)?;
    Ok(h.half_quadratic(dw))
}

fn check_len(net: &NetworkSpec, dw: &[f64]) -> Result<()> {
    if dw.len() != net.param_count() {
        return Err(Error::Table(format!(
            "perturbation has {} entries, network has {} parameters",
            dw.len(),
            net.param_count()
        )));
    }
    Ok(())
}

fn check_jacobian_budget(net: &NetworkSpec) -> Result<()> {
    let entries = net.param_count() * net.classes();
    if entries > JACOBIAN_ENTRY_BUDGET {
        return Err(Error::Budget {
            what: "per-sample output Jacobian",
            required: entries as u128,
            limit: JACOBIAN_ENTRY_BUDGET as u128,
            advice: "use a smaller network",
        });
    }
    Ok(())
}

/// Loss curvature with respect to the softmax outputs for a one-hot label:
/// `diag(y_k / f_k^2)`, with zero entries where `y_k = 0`.
fn output_curvature(probs: &[f64], label: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let y = if k == label { 1.0 } else { 0.0 };
            if y == 0.0 {
                0.0
            } else {
                y / (f * f)
            }
        })
        .collect()
}

/// `1/(2N) sum_n [J_n dw]^T S_n [J_n dw]` from full output Jacobians `J_n`
/// and the cross-entropy output curvature `S_n`.
pub fn ggn_reference(net: &NetworkSpec, samples: &[Sample], dw: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    check_jacobian_budget(net)?;
    check_len(net, dw)?;
    let ws = net.weight_set();
    let terms = samples
        .par_iter()
        .map(|s| {
            let (probs, rows) = net.output_jacobian_with(&ws, &s.input)?;
            if s.label >= probs.len() {
                return Err(Error::Label {
                    label: s.label,
                    classes: probs.len(),
                });
            }
            let sigma = output_curvature(&probs, s.label);
            let jv: Vec<f64> = rows
                .iter()
                .map(|r| r.flatten().iter().zip(dw).map(|(a, b)| a * b).sum())
                .collect();
            Ok(jv.iter().zip(&sigma).map(|(v, s)| v * s * v).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>() / (2.0 * samples.len() as f64))
}

/// Dense `1/N sum_n J_n^T S_n J_n`, row-major.
pub fn ggn_matrix(net: &NetworkSpec, samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let d = check_hessian_budget(net)?;
    let ws = net.weight_set();
    let mut h = vec![0.0; d * d];
    for s in samples {
        let (probs, rows) = net.output_jacobian_with(&ws, &s.input)?;
        let sigma = output_curvature(&probs, s.label);
        for (row, &sk) in rows.iter().zip(&sigma) {
            if sk == 0.0 {
                continue;
            }
            let j = row.flatten();
            for a in 0..d {
                let ja = j[a] * sk;
                for b in 0..d {
                    h[a * d + b] += ja * j[b];
                }
            }
        }
    }
    let n = samples.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// `1/2 v^T M v` for a row-major `dim x dim` matrix.
pub fn quadratic_form(m: &[f64], v: &[f64]) -> f64 {
    half_quadratic(m, v.len(), v)
}

/// Spearman rank correlation with average ranks for ties. `None` when there
/// are fewer than three points or either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub layer: String,
    pub bit: u32,
    pub proxy: f64,
    pub exact: f64,
}

/// How well a proxy orders single-layer quantization damage compared with
/// the true loss change.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub proxy: ProxyKind,
    pub rows: Vec<RankingRow>,
    /// Correlation across layers at each bit; `None` below three layers.
    pub per_bit: Vec<(u32, Option<f64>)>,
    /// Correlation across every (layer, bit) pair.
    pub pooled: Option<f64>,
}

impl RankingReport {
    pub fn from_rows(proxy: ProxyKind, rows: Vec<RankingRow>) -> Self {
        let mut bits: Vec<u32> = rows.iter().map(|r| r.bit).collect();
        bits.sort_unstable();
        bits.dedup();
        let per_bit = bits
            .iter()
            .map(|&b| {
                let (p, e): (Vec<f64>, Vec<f64>) =
                    rows.iter().filter(|r| r.bit == b).map(|r| (r.proxy, r.exact)).unzip();
                (b, spearman(&p, &e))
            })
            .collect();
        let (p, e): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.proxy, r.exact)).unzip();
        RankingReport {
            proxy,
            pooled: spearman(&p, &e),
            per_bit,
            rows,
        }
    }

    /// CSV with header `layer,bit,proxy,exact`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "bit", "proxy", "exact"])?;
        for r in &self.rows {
            out.write_record([
                r.layer.as_str(),
                &r.bit.to_string(),
                &format_f64(r.proxy),
                &format_f64(r.exact),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// True loss change of quantizing one layer at a time, `[layer][bit]`.
pub fn exact_single_layer_changes(
    net: &NetworkSpec,
    samples: &[Sample],
    bits: &[u32],
) -> Result<Vec<Vec<f64>>> {
    let ws = net.weight_set();
    let base = net.mean_loss_with(&ws, samples)?;
    (0..net.weighted_count())
        .map(|l| {
            bits.iter()
                .map(|&b| {
                    let mut q = ws.clone();
                    *q.block_mut(l) = quantize_mse(ws.block(l), b, Signedness::Signed)?.values;
                    Ok(net.mean_loss_with(&q, samples)? - base)
                })
                .collect()
        })
        .collect()
}

/// Ranking reports for several proxies sharing one set of exact values.
pub fn ranking_fidelity_many(
    net: &NetworkSpec,
    samples: &[Sample],
    bits: &[u32],
    proxies: &[ProxyKind],
) -> Result<Vec<RankingReport>> {
    let exact = exact_single_layer_changes(net, samples, bits)?;
    proxies
        .iter()
        .map(|&proxy| {
            let table = perturbation_table(net, samples, bits, proxy, StreamOptions::default())?;
            let mut rows = Vec::new();
            for (l, layer) in table.layers().iter().enumerate() {
                for (j, &bit) in table.bits().iter().enumerate() {
                    let k = bits.iter().position(|&b| b == bit).unwrap();
                    rows.push(RankingRow {
                        layer: layer.clone(),
                        bit,
                        proxy: table.row(l)[j],
                        exact: exact[l][k],
                    });
                }
            }
            Ok(RankingReport::from_rows(proxy, rows))
        })
        .collect()
}

pub fn ranking_fidelity(
    net: &NetworkSpec,
    samples: &[Sample],
    bits: &[u32],
    proxy: ProxyKind,
) -> Result<RankingReport> {
    Ok(ranking_fidelity_many(net, samples, bits, &[proxy])?.remove(0))
}
