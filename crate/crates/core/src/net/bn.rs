//! Batch-normalization folding.
//!
//! At inference, per-channel batch normalization
//! `y = gamma * (x - mean) / sqrt(var + eps) + beta`
//! collapses into the affine form the adder layers carry:
//! `y = scale * x + shift` with `scale = gamma / sqrt(var + eps)` and
//! `shift = beta - gamma * mean / sqrt(var + eps)`. Both paths are kept
//! here so the collapse can be checked differentially.

use crate::error::{Error, Result};

/// Default variance-stabilizing epsilon.
pub const BN_EPS: f64 = 1.0e-4;

/// Per-channel batch-normalization statistics and learned affine.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let p = BnParams {
            gamma,
            beta,
            mean,
            var,
            eps: BN_EPS,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.mean.len() != n || self.var.len() != n {
            return Err(Error::ShapeMismatch(
                "batch-norm parameter vectors must share one length".into(),
            ));
        }
        if n == 0 {
            return Err(Error::InvalidConfig("batch norm needs at least one channel".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("batch-norm eps must be positive".into()));
        }
        if self.var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidConfig(
                "batch-norm variances must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Normalize-then-affine reference path for one channel.
    pub fn apply_direct(&self, ch: usize, x: f64) -> f64 {
        let denom = (self.var[ch] + self.eps).sqrt();
        self.gamma[ch] * (x - self.mean[ch]) / denom + self.beta[ch]
    }

    /// Collapse into per-channel `(scale, shift)` for `scale*x + shift`.
    pub fn fold(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.channels();
        let mut scale = Vec::with_capacity(n);
        let mut shift = Vec::with_capacity(n);
        for ch in 0..n {
            let denom = (self.var[ch] + self.eps).sqrt();
            let s = self.gamma[ch] / denom;
            scale.push(s);
            shift.push(self.beta[ch] - s * self.mean[ch]);
        }
        (scale, shift)
    }
}

/// Relative (or absolute, below 1.0 magnitude) gap between the direct
/// normalization path and the folded affine, for differential checks.
pub fn fold_gap(p: &BnParams, ch: usize, x: f64) -> f64 {
    let direct = p.apply_direct(ch, x);
    let (scale, shift) = p.fold();
    let folded = scale[ch] * x + shift[ch];
    let denom = direct.abs().max(1.0);
    (direct - folded).abs() / denom
}
