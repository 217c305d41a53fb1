//! Photon-count histograms and lifetime value pairs.

use crate::error::{Error, Result};

/// A per-pixel photon-arrival histogram.
///
/// `counts[t]` is the number of photons recorded in time bin `t`. For
/// log-scale-merged histograms, `bin_edges` records the original-bin index
/// range covered by each merged bin (`edges[x]..edges[x+1]`); it is `None`
/// for raw, uniformly binned histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u32>,
    /// Width of one *original* time bin in nanoseconds.
    pub bin_width_ns: f64,
    bin_edges: Option<Vec<usize>>,
}

impl Histogram {
    pub fn new(counts: Vec<u32>, bin_width_ns: f64) -> Self {
        Histogram {
            counts,
            bin_width_ns,
            bin_edges: None,
        }
    }

    /// A merged histogram together with the original-bin edges that
    /// produced it. Edges must be strictly increasing, start at 0, and
    /// have exactly `counts.len() + 1` entries.
    pub fn with_edges(counts: Vec<u32>, bin_width_ns: f64, edges: Vec<usize>) -> Result<Self> {
        if edges.len() != counts.len() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bin edges for {} merged bins, got {}",
                counts.len() + 1,
                counts.len(),
                edges.len()
            )));
        }
        if edges.first() != Some(&0) {
            return Err(Error::InvalidParams("bin edges must start at 0".into()));
        }
        if !edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParams(
                "bin edges must be strictly increasing".into(),
            ));
        }
        Ok(Histogram {
            counts,
            bin_width_ns,
            bin_edges: Some(edges),
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Total photon count across all bins.
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Original-bin edges for merged histograms, `None` for raw ones.
    pub fn bin_edges(&self) -> Option<&[usize]> {
        self.bin_edges.as_deref()
    }

    /// Whether this histogram has already been log-scale merged.
    pub fn is_merged(&self) -> bool {
        self.bin_edges.is_some()
    }

    /// Index of the bin holding the maximum count (first one on ties).
    pub fn peak_bin(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// The two average lifetimes regressed by every estimator in this crate,
/// both in nanoseconds.
///
/// `tau_a` is the amplitude-averaged lifetime `sum(a_i * tau_i)`; `tau_i`
/// is the intensity-averaged lifetime `sum(a_i * tau_i^2) / sum(a_i *
/// tau_i)`. By the Cauchy–Schwarz inequality `tau_i >= tau_a`, with
/// equality exactly for mono-exponential decays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimePair {
    pub tau_a: f64,
    pub tau_i: f64,
}

impl LifetimePair {
    pub fn new(tau_a: f64, tau_i: f64) -> Self {
        LifetimePair { tau_a, tau_i }
    }

    pub const ZERO: LifetimePair = LifetimePair {
        tau_a: 0.0,
        tau_i: 0.0,
    };
}
