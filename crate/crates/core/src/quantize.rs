//! Codebooks, nearest-code quantization with EMA maintenance and code reset,
//! and the residual quantization loop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Array, Tape, Var};

pub const DEFAULT_DECAY: f64 = 0.99;
const COUNT_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[K, D]`.
    pub entries: Array,
    pub ema_count: Vec<f64>,
    pub ema_sum: Array,
    pub staleness: Vec<u64>,
    pub decay: f64,
}

impl Codebook {
    pub fn new<R: Rng + ?Sized>(size: usize, width: usize, decay: f64, rng: &mut R) -> Self {
        Self::from_entries(Array::randn(&[size, width], 0.02, rng), decay)
    }

    pub fn from_entries(entries: Array, decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "decay must lie in (0, 1)");
        let k = entries.shape()[0];
        Self { ema_sum: entries.clone(), ema_count: vec![1.0; k], staleness: vec![0; k], entries, decay }
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.entries.shape()[1]
    }

    fn check_width(&self, op: &'static str, w: usize) -> Result<()> {
        if w != self.width() {
            return Err(Error::shape(op, format!("vector width {w}, codebook width {}", self.width())));
        }
        Ok(())
    }

    /// Index of the closest entry by squared distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> Result<usize> {
        self.check_width("nearest_code", z.len())?;
        Ok(self.nearest_unchecked(z))
    }

    fn nearest_unchecked(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let e = self.entries.row(k);
            let mut d = 0.0;
            for (a, b) in z.iter().zip(e) {
                let t = a - b;
                d += t * t;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Nearest code for every row of a `[.., D]` batch.
    pub fn assign(&self, batch: &Array) -> Result<Vec<usize>> {
        self.check_width("quantize", batch.cols())?;
        Ok((0..batch.rows()).map(|r| self.nearest_unchecked(batch.row(r))).collect())
    }

    /// Rows for `indices`, shaped `[indices.len(), D]`.
    pub fn lookup(&self, indices: &[usize]) -> Result<Array> {
        let d = self.width();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.size() {
                return Err(Error::IndexOutOfRange { index: i, size: self.size() });
            }
            out.extend_from_slice(self.entries.row(i));
        }
        Array::new(&[indices.len().max(1), d], out)
    }

    /// Moving-average re-estimation of the assigned entries. Entries of codes
    /// with no assignment keep their value; their staleness grows by one.
    pub fn ema_update(&mut self, batch: &Array, assignments: &[usize]) -> Result<()> {
        self.check_width("ema_update", batch.cols())?;
        if assignments.len() != batch.rows() {
            return Err(Error::shape("ema_update", format!("{} assignments for {} vectors", assignments.len(), batch.rows())));
        }
        let (k, d) = (self.size(), self.width());
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (r, &a) in assignments.iter().enumerate() {
            if a >= k {
                return Err(Error::IndexOutOfRange { index: a, size: k });
            }
            counts[a] += 1.0;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(batch.row(r)) {
                *s += v;
            }
        }
        let lam = self.decay;
        for c in 0..k {
            self.ema_count[c] = lam * self.ema_count[c] + (1.0 - lam) * counts[c];
            let row = self.ema_sum.row_mut(c);
            for (s, n) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *s = lam * *s + (1.0 - lam) * n;
            }
            if counts[c] > 0.0 {
                let denom = self.ema_count[c].max(COUNT_FLOOR);
                let sum_row = self.ema_sum.row(c).to_vec();
                for (e, s) in self.entries.row_mut(c).iter_mut().zip(sum_row) {
                    *e = s / denom;
                }
                self.staleness[c] = 0;
            } else {
                self.staleness[c] += 1;
            }
        }
        Ok(())
    }

    /// Re-seeds every code whose staleness reached `threshold` with a randomly
    /// chosen batch vector. Returns the number of codes reset.
    pub fn code_reset<R: Rng + ?Sized>(&mut self, batch: &Array, threshold: u64, rng: &mut R) -> Result<usize> {
        self.check_width("code_reset", batch.cols())?;
        let rows = batch.rows();
        if rows == 0 {
            return Err(Error::Invalid("code reset needs a non-empty batch".into()));
        }
        let mut reset = 0;
        for c in 0..self.size() {
            if self.staleness[c] >= threshold {
                let src = batch.row(rng.gen_range(0..rows)).to_vec();
                self.entries.row_mut(c).copy_from_slice(&src);
                self.ema_sum.row_mut(c).copy_from_slice(&src);
                self.ema_count[c] = 1.0;
                self.staleness[c] = 0;
                reset += 1;
            }
        }
        Ok(reset)
    }
}

/// Result of quantizing a batch on a tape.
#[derive(Debug)]
pub struct QuantizeOutcome {
    pub indices: Vec<usize>,
    /// Straight-through carrier: forward value is the codebook rows.
    pub quantized: Var,
    /// Σ‖z − sg(ẑ)‖² over the batch; differentiable in `z` only.
    pub commitment: Var,
}

fn commitment(tape: &mut Tape, z: Var, zhat: Var) -> Result<Var> {
    let sg = tape.stop_gradient(zhat);
    let diff = tape.sub(z, sg)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Quantizes every row of `z` (shape `[.., D]`) against `book`.
pub fn quantize(tape: &mut Tape, z: Var, book: &Codebook) -> Result<QuantizeOutcome> {
    let value = tape.value(z);
    if !value.all_finite() {
        return Err(Error::NonFinite { what: "quantizer input".into() });
    }
    let indices = book.assign(value)?;
    let zhat = book.lookup(&indices)?.reshaped(value.shape())?;
    let zhat = tape.constant(zhat);
    let quantized = tape.straight_through(z, zhat)?;
    let commitment = commitment(tape, z, zhat)?;
    Ok(QuantizeOutcome { indices, quantized, commitment })
}

#[derive(Debug)]
pub struct RvqOutcome {
    pub level_indices: Vec<Vec<usize>>,
    /// Residual entering each level, `[rows, D]`.
    pub level_inputs: Vec<Array>,
    /// Per-level quantized outputs, `[rows, D]`.
    pub level_outputs: Vec<Array>,
    /// Sum of the level outputs, shaped like the input.
    pub zhat: Array,
    pub quantized: Var,
    pub commitment: Var,
}

/// Residual quantization: level `i` quantizes what levels `< i` left over.
pub fn rvq_values(z: &Array, books: &[Codebook]) -> Result<(Vec<Vec<usize>>, Vec<Array>, Vec<Array>, Array)> {
    if books.is_empty() {
        return Err(Error::Invalid("residual quantization needs at least one codebook".into()));
    }
    let d = books[0].width();
    if books.iter().any(|b| b.width() != d) {
        return Err(Error::Invalid("codebook widths differ across levels".into()));
    }
    let flat = z.clone().reshaped(&[z.rows(), z.cols()])?;
    let mut residual = flat;
    let mut zhat: Option<Array> = None;
    let (mut idx, mut ins, mut outs) = (Vec::new(), Vec::new(), Vec::new());
    for book in books {
        let i = book.assign(&residual)?;
        let q = book.lookup(&i)?;
        zhat = Some(match zhat {
            None => q.clone(),
            Some(acc) => acc.zip_map(&q, |a, b| a + b),
        });
        let next = residual.zip_map(&q, |a, b| a - b);
        ins.push(std::mem::replace(&mut residual, next));
        outs.push(q);
        idx.push(i);
    }
    let zhat = zhat.expect("at least one level").reshaped(z.shape())?;
    Ok((idx, ins, outs, zhat))
}

pub fn rvq_quantize(tape: &mut Tape, z: Var, books: &[Codebook]) -> Result<RvqOutcome> {
    let value = tape.value(z);
    if !value.all_finite() {
        return Err(Error::NonFinite { what: "quantizer input".into() });
    }
    let (level_indices, level_inputs, level_outputs, zhat) = rvq_values(value, books)?;
    let zc = tape.constant(zhat.clone());
    let quantized = tape.straight_through(z, zc)?;
    let commitment = commitment(tape, z, zc)?;
    Ok(RvqOutcome { level_indices, level_inputs, level_outputs, zhat, quantized, commitment })
}

/// `exp(entropy)` of the empirical code distribution.
pub fn perplexity(histogram: &[u64]) -> Result<f64> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("empty histogram".into()));
    }
    let n = total as f64;
    let h: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

pub fn histogram(indices: &[usize], size: usize) -> Vec<u64> {
    let mut h = vec![0u64; size];
    for &i in indices {
        h[i] += 1;
    }
    h
}
