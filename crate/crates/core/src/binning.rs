//! Log-scale histogram compression: geometrically growing bin widths that
//! map a `T`-bin histogram onto `M` merged bins while conserving every
//! photon.
//!
//! Bin `x` of the merged histogram covers original bins
//! `[edges[x], edges[x+1])`, where `edges[x] = floor((r^x - 1) / (r - 1))`
//! and the growth ratio `r` solves `(r^M - 1) / (r - 1) = T`.

use crate::error::{Error, Result};
use crate::histogram::Histogram;

/// Residual tolerance for the growth-ratio solve.
const RATIO_TOLERANCE: f64 = 1e-10;

/// Geometric-series prefix `(r^x - 1) / (r - 1)`, continuous in `r` with
/// the limit `x` at `r = 1`.
fn prefix(r: f64, x: usize) -> f64 {
    if r == 1.0 {
        return x as f64;
    }
    (r.powi(x as i32) - 1.0) / (r - 1.0)
}

/// Solve `(r^m - 1) / (r - 1) = t` for the growth ratio `r >= 1` by
/// bisection; the residual of the returned root is at most 1e-10.
pub fn solve_ratio(t_bins: usize, m_bins: usize) -> Result<f64> {
    if m_bins < 2 {
        return Err(Error::InvalidConfig("need at least 2 merged bins".into()));
    }
    if m_bins >= t_bins {
        return Err(Error::InvalidConfig(format!(
            "merged bin count {m_bins} must be smaller than the original bin count {t_bins}"
        )));
    }
    let target = t_bins as f64;
    // prefix(r, m) is strictly increasing in r; bracket the root then
    // bisect.
    let mut lo = 1.0;
    let mut hi = 2.0;
    while prefix(hi, m_bins) < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Numeric("growth-ratio bracket failed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if prefix(mid, m_bins) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let residual = (prefix(root, m_bins) - target).abs();
    if residual > RATIO_TOLERANCE {
        return Err(Error::Numeric(format!(
            "growth-ratio residual {residual} exceeds {RATIO_TOLERANCE}"
        )));
    }
    Ok(root)
}

/// Precomputed merged-bin layout for one `(T, M)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LogBinning {
    edges: Vec<usize>,
    ratio: f64,
}

impl LogBinning {
    pub fn new(t_bins: usize, m_bins: usize) -> Result<Self> {
        let ratio = solve_ratio(t_bins, m_bins)?;
        let mut edges: Vec<usize> = (0..=m_bins)
            .map(|x| prefix(ratio, x).floor() as usize)
            .collect();
        // The exact prefix at x = M is T; pin the last edge against
        // floating-point undershoot.
        edges[m_bins] = t_bins;
        for w in edges.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Numeric(format!(
                    "merged-bin edges not strictly increasing at {}..{}",
                    w[0], w[1]
                )));
            }
        }
        Ok(LogBinning { edges, ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Merged-bin boundaries in original-bin units; length is the merged
    /// bin count plus one.
    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn num_merged(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn num_original(&self) -> usize {
        self.edges[self.edges.len() - 1]
    }

    /// Width of each merged bin in original bins.
    pub fn widths(&self) -> Vec<usize> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Sum each merged bin's photons; the output carries the edge layout
    /// and the same bin width metadata as the input.
    pub fn merge(&self, h: &Histogram) -> Result<Histogram> {
        if h.len() != self.num_original() {
            return Err(Error::ShapeMismatch(format!(
                "histogram has {} bins, binning expects {}",
                h.len(),
                self.num_original()
            )));
        }
        let counts = self
            .edges
            .windows(2)
            .map(|w| {
                let sum: u64 = h.counts[w[0]..w[1]].iter().map(|&c| c as u64).sum();
                u32::try_from(sum).map_err(|_| Error::Numeric("merged bin overflows u32".into()))
            })
            .collect::<Result<Vec<u32>>>()?;
        Histogram::with_edges(counts, h.bin_width_ns, self.edges.clone())
    }

    /// Merge a real-valued curve with the same layout (for noiseless
    /// references and diagnostics).
    pub fn merge_f64(&self, curve: &[f64]) -> Result<Vec<f64>> {
        if curve.len() != self.num_original() {
            return Err(Error::ShapeMismatch(format!(
                "curve has {} bins, binning expects {}",
                curve.len(),
                self.num_original()
            )));
        }
        Ok(self
            .edges
            .windows(2)
            .map(|w| curve[w[0]..w[1]].iter().sum())
            .collect())
    }
}
