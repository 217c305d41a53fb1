//! Center-of-mass lifetime estimation.
//!
//! For a background-free exponential the mean arrival time past the
//! excitation equals the lifetime, so the windowed first moment of the
//! histogram, shifted by the instrument response's own centroid, is a
//! closed-form estimate:
//!
//! `tau = bin_width * (window centroid in bins) - t_ref`, with
//! `t_ref = (irf_centroid_bins - window_start) * bin_width`.
//!
//! Time is measured at bin indices (left edges). When the window starts
//! past the instrument centroid, `t_ref` is negative and the correction
//! adds the time between the instrument centroid and the window start
//! back onto the windowed centroid. The estimate is clamped at zero.

use crate::error::{Error, Result};
use crate::histogram::Histogram;

/// Options for [`cmm_lifetime`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmmOptions {
    /// Half-open bin window `[start, end)`; `None` runs from the peak
    /// bin to the end of the histogram.
    pub window: Option<(usize, usize)>,
    /// Centroid of the instrument response in (fractional) bins,
    /// measured on the same absolute axis as the histogram. Zero means
    /// no instrument correction.
    pub irf_centroid_bins: f64,
}

impl Default for CmmOptions {
    fn default() -> Self {
        CmmOptions {
            window: None,
            irf_centroid_bins: 0.0,
        }
    }
}

/// Estimate a lifetime (ns) from the first moment of a count histogram.
pub fn cmm_lifetime(hist: &Histogram, opts: &CmmOptions) -> Result<f64> {
    if hist.is_merged() {
        return Err(Error::InvalidParams(
            "center-of-mass estimation expects a uniform-width histogram".into(),
        ));
    }
    let n = hist.counts.len();
    if n == 0 {
        return Err(Error::Degenerate("empty histogram".into()));
    }
    let (start, end) = opts.window.unwrap_or((hist.peak_bin(), n));
    if start >= end || end > n {
        return Err(Error::InvalidParams(format!(
            "window [{start}, {end}) is not a valid sub-range of 0..{n}"
        )));
    }
    if !opts.irf_centroid_bins.is_finite() {
        return Err(Error::InvalidParams(
            "instrument centroid must be finite".into(),
        ));
    }

    let mut total = 0.0f64;
    let mut moment = 0.0f64;
    for (offset, &c) in hist.counts[start..end].iter().enumerate() {
        total += c as f64;
        moment += (offset as f64) * c as f64;
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate(
            "no photons inside the estimation window".into(),
        ));
    }

    let dt = hist.bin_width_ns;
    let centroid = moment / total;
    let t_ref = (opts.irf_centroid_bins - start as f64) * dt;
    Ok((dt * centroid - t_ref).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{
        synthesize_decay_with, DecayParams, InstrumentConfig, IrfKernel, SynthOptions,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geometric_histogram(tau_bins: f64, n: usize, scale: f64) -> Histogram {
        let counts = (0..n)
            .map(|i| (scale * (-(i as f64) / tau_bins).exp()).round() as u32)
            .collect();
        Histogram::new(counts, 1.0)
    }

    #[test]
    fn geometric_decay_centroid_matches_closed_form() {
        // A sampled exponential with tau = 25 bins has mean bin index
        // r/(1-r) with r = exp(-1/25), i.e. 24.5031 bins.
        let hist = geometric_histogram(25.0, 2048, 1.0e7);
        let tau = cmm_lifetime(
            &hist,
            &CmmOptions {
                window: Some((0, 2048)),
                irf_centroid_bins: 0.0,
            },
        )
        .unwrap();
        let expect = {
            let r = (-1.0f64 / 25.0).exp();
            r / (1.0 - r)
        };
        assert!((tau - expect).abs() < 0.01, "tau={tau} expect={expect}");
        assert!((tau - 24.503).abs() < 0.5);
    }

    #[test]
    fn uniform_histogram_centroid_is_midpoint() {
        let hist = Histogram::new(vec![5; 11], 2.0);
        let tau = cmm_lifetime(
            &hist,
            &CmmOptions {
                window: Some((0, 11)),
                irf_centroid_bins: 0.0,
            },
        )
        .unwrap();
        assert!((tau - 2.0 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn default_window_starts_at_peak() {
        // Put junk before the peak; the default window must ignore it.
        let mut counts = vec![0u32; 4];
        counts.extend((0..64).map(|i| (1.0e6 * (-(i as f64) / 8.0).exp()).round() as u32));
        let hist = Histogram::new(counts, 1.0);
        let defaulted = cmm_lifetime(&hist, &CmmOptions::default()).unwrap();
        let explicit = cmm_lifetime(
            &hist,
            &CmmOptions {
                window: Some((4, 68)),
                irf_centroid_bins: 0.0,
            },
        )
        .unwrap();
        assert_eq!(hist.peak_bin(), 4);
        assert_eq!(defaulted, explicit);
    }

    #[test]
    fn signed_reference_recovers_mono_lifetime_through_the_instrument() {
        // Synthesize tau = 2 ns decays at 5000 peak photons and average
        // the estimate over 100 seeds; it must land within 0.1 ns.
        let cfg = InstrumentConfig::default();
        let irf_centroid = IrfKernel::new(&cfg).unwrap().centroid_bins();
        let params = DecayParams::mono(2.0, 5000);
        let opts = SynthOptions::default();
        let mut sum = 0.0;
        let seeds = 100;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hist = synthesize_decay_with(&params, &cfg, &mut rng, &opts).unwrap();
            sum += cmm_lifetime(
                &hist,
                &CmmOptions {
                    window: None,
                    irf_centroid_bins: irf_centroid,
                },
            )
            .unwrap();
        }
        let mean = sum / seeds as f64;
        assert!(
            (1.9..=2.1).contains(&mean),
            "mean estimate {mean} outside [1.9, 2.1]"
        );
    }

    #[test]
    fn estimate_clamps_at_zero() {
        // All photons in the first window bin, instrument centroid far
        // to the right of the window start.
        let hist = Histogram::new(vec![100, 0, 0, 0], 1.0);
        let tau = cmm_lifetime(
            &hist,
            &CmmOptions {
                window: Some((0, 4)),
                irf_centroid_bins: 3.0,
            },
        )
        .unwrap();
        assert_eq!(tau, 0.0);
    }

    #[test]
    fn degenerate_and_invalid_inputs_are_rejected() {
        let hist = Histogram::new(vec![0u32; 16], 1.0);
        assert!(matches!(
            cmm_lifetime(&hist, &CmmOptions::default()),
            Err(Error::Degenerate(_))
        ));

        let hist = Histogram::new(vec![1u32; 16], 1.0);
        for window in [(8, 8), (8, 4), (0, 17)] {
            assert!(cmm_lifetime(
                &hist,
                &CmmOptions {
                    window: Some(window),
                    irf_centroid_bins: 0.0
                }
            )
            .is_err());
        }

        let merged =
            Histogram::with_edges(vec![1u32; 8], 1.0, vec![0, 1, 2, 3, 4, 5, 6, 7, 16]).unwrap();
        assert!(cmm_lifetime(&merged, &CmmOptions::default()).is_err());

        assert!(cmm_lifetime(
            &Histogram::new(vec![1u32; 8], 1.0),
            &CmmOptions {
                window: None,
                irf_centroid_bins: f64::NAN
            }
        )
        .is_err());
    }
}
