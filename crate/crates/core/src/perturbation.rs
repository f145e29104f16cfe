//! Per-layer, per-bit loss perturbation estimates.
//!
//! The second-order proxy for layer `l` at bit `b` is
//!
//! ```text
//! dL[l][b] = 1/(2N) * sum_n (g_n^(l) . dw_b^(l))^2
//! ```
//!
//! where `g_n^(l)` is the gradient of sample `n`'s cross-entropy loss with
//! respect to layer `l`'s flattened weights and `dw_b^(l)` is that layer's
//! quantization error at `b` bits. Since `grad(loss) = -grad(f_t) / f_t` for
//! the true class `t`, this is the Gauss-Newton quadratic form restricted to
//! the layer's diagonal block, evaluated from one backward pass per sample.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{NetworkSpec, Sample, WeightSet};
use crate::quantizer::{delta_w, Signedness};

/// Samples whose per-sample terms are materialized together before being
/// added, in order, to the running sums.
const STREAM_CHUNK: usize = 64;

/// Calibration sample count used when none is configured.
pub const DEFAULT_SAMPLES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ProxyKind {
    /// `1/(2N) sum_n (g_n . dw)^2`.
    #[default]
    SecondOrder,
    /// `|g . dw|` with `g` the mean loss gradient.
    FirstOrder,
    /// `1/2 dw . dw`.
    HessianFree,
    /// First-order plus second-order.
    Combined,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 4] = [
        ProxyKind::SecondOrder,
        ProxyKind::FirstOrder,
        ProxyKind::HessianFree,
        ProxyKind::Combined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProxyKind::SecondOrder => "second-order",
            ProxyKind::FirstOrder => "first-order",
            ProxyKind::HessianFree => "hessian-free",
            ProxyKind::Combined => "combined",
        }
    }

    fn needs_gradients(&self) -> bool {
        !matches!(self, ProxyKind::HessianFree)
    }
}

impl fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProxyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ProxyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                format!("unknown proxy `{s}` (expected second-order, first-order, hessian-free or combined)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamOptions {
    /// Sum per-sample terms in sample order regardless of thread count.
    /// When off, partial sums are reduced in whatever order rayon picks.
    pub deterministic: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            deterministic: true,
        }
    }
}

/// Estimated loss increase for every (weighted layer, candidate bit) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTable {
    layers: Vec<String>,
    bits: Vec<u32>,
    /// `values[layer][bit index]`
    values: Vec<Vec<f64>>,
    samples: usize,
    seed: Option<u64>,
    proxy: ProxyKind,
}

impl PerturbationTable {
    pub fn new(
        layers: Vec<String>,
        bits: Vec<u32>,
        values: Vec<Vec<f64>>,
        samples: usize,
        proxy: ProxyKind,
    ) -> Result<Self> {
        let bits = normalize_bits(&bits)?;
        if layers.is_empty() {
            return Err(Error::Table("no layers".into()));
        }
        if values.len() != layers.len() || values.iter().any(|r| r.len() != bits.len()) {
            return Err(Error::Table(format!(
                "expected {} x {} values",
                layers.len(),
                bits.len()
            )));
        }
        for (name, row) in layers.iter().zip(&values) {
            if let Some((j, v)) = row.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Table(format!(
                    "layer `{name}` bit {}: value {v} is not a finite non-negative number",
                    bits[j]
                )));
            }
        }
        Ok(PerturbationTable {
            layers,
            bits,
            values,
            samples,
            seed: None,
            proxy,
        })
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn proxy(&self) -> ProxyKind {
        self.proxy
    }

    /// Row of values for the layer at position `i`, in bit order.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn get(&self, layer: &str, bit: u32) -> Option<f64> {
        let i = self.layers.iter().position(|l| l == layer)?;
        let j = self.bits.iter().position(|&b| b == bit)?;
        Some(self.values[i][j])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, f64)> + '_ {
        self.layers.iter().zip(&self.values).flat_map(move |(l, row)| {
            self.bits
                .iter()
                .zip(row)
                .map(move |(&b, &v)| (l.as_str(), b, v))
        })
    }

    /// CSV with header `layer,bit,delta_loss`, values at 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "bit", "delta_loss"])?;
        for (layer, bit, v) in self.iter() {
            out.write_record([layer, &bit.to_string(), &format_f64(v)])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Parses the CSV written by [`write_csv`](Self::write_csv). Layer order
    /// follows first appearance; every layer must carry the same bit set.
    pub fn read_csv<R: Read>(r: R, samples: usize, proxy: ProxyKind) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["layer", "bit", "delta_loss"] {
            return Err(Error::Table(format!(
                "expected header layer,bit,delta_loss, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries: Vec<(String, Vec<(u32, f64)>)> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Table(format!("row {}: bad {what}", line + 1));
            let layer = rec.get(0).ok_or_else(|| bad("layer"))?.to_string();
            let bit: u32 = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad("bit"))?;
            let v: f64 = rec
                .get(2)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad("delta_loss"))?;
            match entries.iter_mut().find(|(l, _)| *l == layer) {
                Some((_, row)) => row.push((bit, v)),
                None => entries.push((layer, vec![(bit, v)])),
            }
        }
        if entries.is_empty() {
            return Err(Error::Table("no rows".into()));
        }
        let bits = normalize_bits(&entries[0].1.iter().map(|e| e.0).collect::<Vec<_>>())?;
        let mut layers = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (layer, mut row) in entries {
            row.sort_by_key(|e| e.0);
            let row_bits: Vec<u32> = row.iter().map(|e| e.0).collect();
            if row_bits != bits {
                return Err(Error::Table(format!(
                    "layer `{layer}` has bits {row_bits:?}, expected {bits:?}"
                )));
            }
            values.push(row.into_iter().map(|e| e.1).collect());
            layers.push(layer);
        }
        PerturbationTable::new(layers, bits, values, samples, proxy)
    }
}

/// Shortest form that still carries 17 significant digits.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn normalize_bits(bits: &[u32]) -> Result<Vec<u32>> {
    if bits.is_empty() {
        return Err(Error::Bits("candidate bit set is empty".into()));
    }
    if let Some(b) = bits.iter().find(|&&b| !(1..=32).contains(&b)) {
        return Err(Error::Bits(format!("bit-width {b} outside [1, 32]")));
    }
    let mut out = bits.to_vec();
    out.sort_unstable();
    let before = out.len();
    out.dedup();
    if out.len() != before {
        return Err(Error::Bits(format!("duplicate bit-width in {bits:?}")));
    }
    Ok(out)
}

/// Quantization errors `Q(w, b) - w` for every weighted layer and bit,
/// computed once up front.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantDeltas {
    layers: Vec<String>,
    bits: Vec<u32>,
    /// `deltas[layer][bit index]`
    deltas: Vec<Vec<Vec<f64>>>,
}

impl QuantDeltas {
    pub fn compute(net: &NetworkSpec, bits: &[u32]) -> Result<Self> {
        let bits = normalize_bits(bits)?;
        let ws = net.weight_set();
        let pairs: Vec<(usize, u32)> = (0..net.weighted_count())
            .flat_map(|l| bits.iter().map(move |&b| (l, b)))
            .collect();
        let flat = pairs
            .par_iter()
            .map(|&(l, b)| delta_w(ws.block(l), b, Signedness::Signed))
            .collect::<Result<Vec<_>>>()?;
        let mut it = flat.into_iter();
        let deltas = (0..net.weighted_count())
            .map(|_| it.by_ref().take(bits.len()).collect())
            .collect();
        Ok(QuantDeltas {
            layers: net.weighted_names(),
            bits,
            deltas,
        })
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn get(&self, layer: usize, bit_index: usize) -> &[f64] {
        &self.deltas[layer][bit_index]
    }

    /// Full flattened perturbation that quantizes only `layer` at `bit_index`.
    pub fn single_layer(&self, net: &NetworkSpec, layer: usize, bit_index: usize) -> Vec<f64> {
        let mut blocks: Vec<Vec<f64>> = net
            .weighted_layers()
            .map(|l| vec![0.0; l.param_count()])
            .collect();
        blocks[layer].clone_from(&self.deltas[layer][bit_index]);
        blocks.concat()
    }

    fn cells(&self) -> usize {
        self.layers.len() * self.bits.len()
    }
}

/// Running sums of `g . dw` and `(g . dw)^2` per (layer, bit) cell.
#[derive(Debug, Clone)]
struct Sums {
    first: Vec<f64>,
    second: Vec<f64>,
    count: usize,
}

impl Sums {
    fn new(cells: usize) -> Self {
        Sums {
            first: vec![0.0; cells],
            second: vec![0.0; cells],
            count: 0,
        }
    }

    fn add_dots(&mut self, dots: &[f64]) {
        for ((f, s), &d) in self.first.iter_mut().zip(&mut self.second).zip(dots) {
            *f += d;
            *s += d * d;
        }
        self.count += 1;
    }

    fn merge(mut self, other: Sums) -> Sums {
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a += b;
        }
        for (a, b) in self.second.iter_mut().zip(&other.second) {
            *a += b;
        }
        self.count += other.count;
        self
    }
}

/// `g_n^(l) . dw_b^(l)` for every cell, one backward pass.
fn sample_dots(
    net: &NetworkSpec,
    ws: &WeightSet,
    deltas: &QuantDeltas,
    sample: &Sample,
) -> Result<Vec<f64>> {
    let (_, grads) = net.loss_grad_with(ws, sample)?;
    let mut dots = Vec::with_capacity(deltas.cells());
    for (l, g) in grads.blocks().iter().enumerate() {
        for dw in &deltas.deltas[l] {
            dots.push(g.iter().zip(dw).map(|(a, b)| a * b).sum());
        }
    }
    Ok(dots)
}

fn stream_ordered(
    net: &NetworkSpec,
    ws: &WeightSet,
    deltas: &QuantDeltas,
    samples: &[Sample],
    sums: &mut Sums,
) -> Result<()> {
    for chunk in samples.chunks(STREAM_CHUNK) {
        let dots = chunk
            .par_iter()
            .map(|s| sample_dots(net, ws, deltas, s))
            .collect::<Result<Vec<_>>>()?;
        for d in &dots {
            sums.add_dots(d);
        }
    }
    Ok(())
}

fn stream_unordered(
    net: &NetworkSpec,
    ws: &WeightSet,
    deltas: &QuantDeltas,
    samples: &[Sample],
) -> Result<Sums> {
    let cells = deltas.cells();
    samples
        .par_iter()
        .try_fold(
            || Sums::new(cells),
            |mut acc, s| {
                acc.add_dots(&sample_dots(net, ws, deltas, s)?);
                Ok(acc)
            },
        )
        .try_reduce(|| Sums::new(cells), |a, b| Ok(a.merge(b)))
}

fn finish(deltas: &QuantDeltas, sums: &Sums, proxy: ProxyKind) -> Result<PerturbationTable> {
    let n = sums.count as f64;
    let nb = deltas.bits.len();
    let values = (0..deltas.layers.len())
        .map(|l| {
            (0..nb)
                .map(|j| {
                    let c = l * nb + j;
                    let first = || (sums.first[c] / n).abs();
                    let second = || sums.second[c] / (2.0 * n);
                    match proxy {
                        ProxyKind::SecondOrder => second(),
                        ProxyKind::FirstOrder => first(),
                        ProxyKind::Combined => first() + second(),
                        ProxyKind::HessianFree => {
                            0.5 * deltas.deltas[l][j].iter().map(|d| d * d).sum::<f64>()
                        }
                    }
                })
                .collect()
        })
        .collect();
    PerturbationTable::new(
        deltas.layers.clone(),
        deltas.bits.clone(),
        values,
        sums.count,
        proxy,
    )
}

/// Builds the table for `proxy` from precomputed quantization errors.
pub fn perturbation_table_with(
    net: &NetworkSpec,
    samples: &[Sample],
    deltas: &QuantDeltas,
    proxy: ProxyKind,
    opts: StreamOptions,
) -> Result<PerturbationTable> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if deltas.layers != net.weighted_names() {
        return Err(Error::Table("quantization errors were computed for a different network".into()));
    }
    let ws = net.weight_set();
    let sums = if !proxy.needs_gradients() {
        Sums {
            count: samples.len(),
            ..Sums::new(0)
        }
    } else if opts.deterministic {
        let mut sums = Sums::new(deltas.cells());
        stream_ordered(net, &ws, deltas, samples, &mut sums)?;
        sums
    } else {
        stream_unordered(net, &ws, deltas, samples)?
    };
    finish(deltas, &sums, proxy)
}

pub fn perturbation_table(
    net: &NetworkSpec,
    samples: &[Sample],
    bits: &[u32],
    proxy: ProxyKind,
    opts: StreamOptions,
) -> Result<PerturbationTable> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let deltas = QuantDeltas::compute(net, bits)?;
    perturbation_table_with(net, samples, &deltas, proxy, opts)
}

/// Sample order used for calibration: a seeded shuffle, or the given order
/// when `seed` is `None`.
pub fn calibration_order(len: usize, seed: Option<u64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(seed) = seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx
}

/// First `n` samples of the calibration order, drawn without replacement.
pub fn calibration_subset(samples: &[Sample], n: usize, seed: Option<u64>) -> Result<Vec<Sample>> {
    if n > samples.len() {
        return Err(Error::Checkpoint {
            checkpoint: n,
            available: samples.len(),
        });
    }
    Ok(calibration_order(samples.len(), seed)
        .into_iter()
        .take(n)
        .map(|i| samples[i].clone())
        .collect())
}

/// Tables over nested prefixes of the calibration order, one per checkpoint.
/// A single pass over the largest prefix produces all of them.
pub fn convergence_profile(
    net: &NetworkSpec,
    samples: &[Sample],
    bits: &[u32],
    checkpoints: &[usize],
    proxy: ProxyKind,
    seed: Option<u64>,
) -> Result<Vec<(usize, PerturbationTable)>> {
    if checkpoints.is_empty() {
        return Err(Error::Table("no checkpoints".into()));
    }
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Table(format!("checkpoints {checkpoints:?} are not ascending")));
    }
    if checkpoints[0] == 0 {
        return Err(Error::EmptySamples);
    }
    let last = *checkpoints.last().unwrap();
    let ordered = calibration_subset(samples, last, seed)?;
    let deltas = QuantDeltas::compute(net, bits)?;
    let ws = net.weight_set();

    let mut out = Vec::with_capacity(checkpoints.len());
    let mut sums = Sums::new(if proxy.needs_gradients() { deltas.cells() } else { 0 });
    for &cp in checkpoints {
        if proxy.needs_gradients() {
            stream_ordered(net, &ws, &deltas, &ordered[sums.count..cp], &mut sums)?;
        } else {
            sums.count = cp;
        }
        out.push((cp, finish(&deltas, &sums, proxy)?.with_seed(seed)));
    }
    Ok(out)
}
