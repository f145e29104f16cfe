//! Uniform symmetric fixed-point quantization with an MSE-optimal step size.
//!
//! A signed `b`-bit grid is `s * {-2^(b-1), ..., 2^(b-1) - 1}`; an unsigned
//! one is `s * {0, ..., 2^b - 1}`. Values are mapped with
//! `clip(round(w / s), lo, hi) * s`, ties rounding away from zero.

use crate::error::{Error, Result};

/// Evenly spaced step sizes tried before refinement.
const COARSE_POINTS: usize = 256;
/// Coarse steps on each side of the best coarse point covered by the fine sweep.
const FINE_HALF_WIDTH: usize = 8;
/// Fine sweep points per coarse interval.
const FINE_PER_COARSE: usize = 8;
/// Fine-sweep minima that get refined.
const REFINE_SEEDS: usize = 4;
const GOLDEN_ITERS: usize = 24;
const LLOYD_ITERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signedness {
    Signed,
    Unsigned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGrid {
    bits: u32,
    signedness: Signedness,
    step: f64,
}

impl QuantGrid {
    pub fn new(bits: u32, signedness: Signedness, step: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Bits(format!("step size must be positive, got {step}")));
        }
        Ok(QuantGrid {
            bits,
            signedness,
            step,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Integer level bounds `(lo, hi)`, inclusive.
    pub fn level_range(&self) -> (f64, f64) {
        level_range(self.bits, self.signedness)
    }

    pub fn quantize_value(&self, v: f64) -> f64 {
        let (lo, hi) = self.level_range();
        // `+ 0.0` folds -0.0 into 0.0 so zero is a single level
        round_clamped(v / self.step, lo, hi) * self.step + 0.0
    }

    /// Whether `v` is exactly one of the grid points.
    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.level_range();
        let k = round_clamped(v / self.step, f64::MIN, f64::MAX);
        k >= lo && k <= hi && k * self.step + 0.0 == v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub values: Vec<f64>,
    pub grid: QuantGrid,
    pub mse: f64,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=32).contains(&bits) {
        return Err(Error::Bits(format!("bit-width {bits} outside [1, 32]")));
    }
    Ok(())
}

fn level_range(bits: u32, signedness: Signedness) -> (f64, f64) {
    match signedness {
        Signedness::Signed => {
            let half = 2f64.powi(bits as i32 - 1);
            (-half, half - 1.0)
        }
        Signedness::Unsigned => (0.0, 2f64.powi(bits as i32) - 1.0),
    }
}

/// `round(clamp(x, lo, hi))` with ties away from zero. Clamping first is
/// equivalent for integer bounds and keeps the cast in range.
#[inline]
fn round_clamped(x: f64, lo: f64, hi: f64) -> f64 {
    let x = x.clamp(lo, hi);
    let t = x.abs();
    let i = t as i64 as f64;
    let r = if t - i >= 0.5 { i + 1.0 } else { i };
    r.copysign(x)
}

fn check_finite(w: &[f64]) -> Result<()> {
    match w.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Mean squared quantization error of `w` at step `s`.
pub fn mse_at(w: &[f64], step: f64, lo: f64, hi: f64) -> f64 {
    let sum: f64 = w
        .iter()
        .map(|&v| {
            let e = v - round_clamped(v / step, lo, hi) * step;
            e * e
        })
        .sum();
    sum / w.len() as f64
}

/// Sum of squared errors at step `s`, rounding ties to even through the
/// `2^52 + 2^51` trick so the loop vectorizes. Ties have measure zero, so
/// this ranks step sizes exactly like [`mse_at`] does.
fn search_cost(w: &[f64], step: f64, lo: f64, hi: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let inv = 1.0 / step;
    let mut acc = [0.0f64; 4];
    let mut chunks = w.chunks_exact(4);
    for c in &mut chunks {
        for k in 0..4 {
            let q = ((c[k] * inv).clamp(lo, hi) + MAGIC) - MAGIC;
            let e = c[k] - q * step;
            acc[k] += e * e;
        }
    }
    let mut tail = 0.0;
    for &v in chunks.remainder() {
        let q = ((v * inv).clamp(lo, hi) + MAGIC) - MAGIC;
        let e = v - q * step;
        tail += e * e;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Finds the step size minimizing `||w - Q(w)||` for a `bits`-bit grid.
///
/// A coarse sweep over `(0, 2 max|w| / max_level]` locates the best basin,
/// a finer sweep around it finds candidate minima, and each of the best few
/// is refined by golden-section search followed by a least-squares
/// fixed-point pass (re-fit `s` to the current levels, re-round). Only the
/// lowest MSE seen is kept, so the result is never worse than the best
/// coarse point.
pub fn solve_step_size(w: &[f64], bits: u32, signedness: Signedness) -> Result<QuantGrid> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::Bits("cannot fit a step size to an empty vector".into()));
    }
    check_finite(w)?;
    let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return QuantGrid::new(bits, signedness, 1.0);
    }
    let (lo, hi) = level_range(bits, signedness);
    let max_level = lo.abs().max(hi);
    let span = 2.0 * max_abs / max_level;
    let cost = |s: f64| search_cost(w, s, lo, hi);

    let delta = span / COARSE_POINTS as f64;
    let mut best = (f64::NAN, f64::INFINITY);
    let mut best_i = 0;
    for i in 1..=COARSE_POINTS {
        let s = delta * i as f64;
        let e = cost(s);
        if e < best.1 {
            best = (s, e);
            best_i = i;
        }
    }

    // the global basin is rarely wider than a few coarse steps but can hide
    // narrow dips between them
    let fine_step = delta / FINE_PER_COARSE as f64;
    let first = best_i.saturating_sub(FINE_HALF_WIDTH).max(1) * FINE_PER_COARSE;
    let last = (best_i + FINE_HALF_WIDTH) * FINE_PER_COARSE;
    let mut fine: Vec<(f64, f64)> = (first..=last)
        .map(|k| {
            let s = fine_step * k as f64;
            (s, cost(s))
        })
        .collect();
    fine.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    for &(s, e) in fine.iter().take(REFINE_SEEDS) {
        let bracket = ((s - fine_step).max(fine_step * 1e-3), s + fine_step);
        let mut found = golden_section(&cost, bracket.0, bracket.1);
        if e < found.1 {
            found = (s, e);
        }
        let found = lloyd_polish(w, found, lo, hi);
        if found.1 < best.1 {
            best = found;
        }
    }
    QuantGrid::new(bits, signedness, best.0)
}

fn golden_section(cost: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for _ in 0..GOLDEN_ITERS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = cost(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = cost(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

/// For fixed integer levels the best step is `sum(w q) / sum(q^2)`;
/// alternating that fit with re-rounding never increases the error.
fn lloyd_polish(w: &[f64], start: (f64, f64), lo: f64, hi: f64) -> (f64, f64) {
    let mut best = start;
    let mut s = start.0;
    for _ in 0..LLOYD_ITERS {
        let (mut wq, mut qq) = (0.0, 0.0);
        for &v in w {
            let q = round_clamped(v / s, lo, hi);
            wq += v * q;
            qq += q * q;
        }
        if qq == 0.0 || wq <= 0.0 {
            break;
        }
        let next = wq / qq;
        let e = search_cost(w, next, lo, hi);
        // also stops on a NaN cost
        if e.partial_cmp(&best.1) != Some(std::cmp::Ordering::Less) {
            break;
        }
        best = (next, e);
        s = next;
    }
    best
}

/// `clip(round(w / s), lo, hi) * s` elementwise.
pub fn quantize(w: &[f64], grid: &QuantGrid) -> Result<Vec<f64>> {
    check_finite(w)?;
    Ok(w.iter().map(|&v| grid.quantize_value(v)).collect())
}

/// Quantizes with the MSE-optimal step size.
pub fn quantize_mse(w: &[f64], bits: u32, signedness: Signedness) -> Result<QuantResult> {
    let grid = solve_step_size(w, bits, signedness)?;
    let values = quantize(w, &grid)?;
    let mse = w
        .iter()
        .zip(&values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / w.len() as f64;
    Ok(QuantResult { values, grid, mse })
}

/// Quantization perturbation `Q(w, b) - w` with the MSE-optimal step size.
pub fn delta_w(w: &[f64], bits: u32, signedness: Signedness) -> Result<Vec<f64>> {
    let q = quantize_mse(w, bits, signedness)?;
    Ok(q.values.iter().zip(w).map(|(q, w)| q - w).collect())
}
