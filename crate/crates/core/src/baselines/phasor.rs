//! Phasor projection: each histogram maps to one point of the unit
//! phasor plot via the first (or a higher) harmonic of its normalized
//! Fourier transform.
//!
//! With `omega = 2*pi / (num_bins * bin_width)` and absolute bin times
//! `t_i = i * bin_width`:
//!
//! `g = sum(h_i * cos(k*omega*t_i)) / sum(h_i)`
//! `s = sum(h_i * sin(k*omega*t_i)) / sum(h_i)`
//!
//! Ideal mono-exponential decays land on the universal semicircle of
//! radius 1/2 centered at (1/2, 0); mixtures fall inside it. A single
//! lifetime follows as `tau = s / (g * omega)`.

use crate::error::{Error, Result};
use crate::histogram::Histogram;

/// One point on the phasor plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phasor {
    pub g: f64,
    pub s: f64,
}

/// Angular frequency of the measurement window's fundamental harmonic,
/// in radians per nanosecond.
pub fn fundamental_omega(hist: &Histogram) -> f64 {
    std::f64::consts::TAU / (hist.counts.len() as f64 * hist.bin_width_ns)
}

/// Project a histogram onto the phasor plane at the given harmonic
/// (1 = fundamental).
pub fn phasor_coords(hist: &Histogram, harmonic: u32) -> Result<Phasor> {
    if hist.is_merged() {
        return Err(Error::InvalidParams(
            "phasor projection expects a uniform-width histogram".into(),
        ));
    }
    if hist.counts.is_empty() {
        return Err(Error::Degenerate("empty histogram".into()));
    }
    if harmonic == 0 {
        return Err(Error::InvalidParams("harmonic must be at least 1".into()));
    }
    let total = hist.total();
    if total == 0 {
        return Err(Error::Degenerate("histogram holds no photons".into()));
    }

    // k * omega * t_i depends only on i / num_bins, so work in turns.
    let n = hist.counts.len() as f64;
    let mut g = 0.0f64;
    let mut s = 0.0f64;
    for (i, &c) in hist.counts.iter().enumerate() {
        let phase = std::f64::consts::TAU * harmonic as f64 * i as f64 / n;
        let c = c as f64;
        g += c * phase.cos();
        s += c * phase.sin();
    }
    let total = total as f64;
    Ok(Phasor {
        g: g / total,
        s: s / total,
    })
}

/// Single-lifetime readout of a phasor point: `tau = s / (g * omega)`.
/// Defined only on the right half-plane (`g > 0`).
pub fn phasor_lifetime(p: &Phasor, omega: f64) -> Result<f64> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::InvalidParams(format!(
            "angular frequency must be positive and finite, got {omega}"
        )));
    }
    if !(p.g > 0.0) {
        return Err(Error::Numeric(format!(
            "phasor lifetime needs g > 0, got g = {}",
            p.g
        )));
    }
    Ok(p.s / (p.g * omega))
}

/// The ideal continuous-time phasor of a mono-exponential decay with
/// the given `omega * tau` product; these points trace the universal
/// semicircle.
pub fn mono_phasor_point(omega_tau: f64) -> Phasor {
    let d = 1.0 + omega_tau * omega_tau;
    Phasor {
        g: 1.0 / d,
        s: omega_tau / d,
    }
}
