//! Synthetic decay generation: instrument response functions,
//! multi-exponential decay curves, Poisson-noised histograms, and labeled
//! datasets for training and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::histogram::{Histogram, LifetimePair};

/// Instrument model: time axis layout and the synthetic IRF shape.
///
/// The IRF is a super-Gaussian of order `irf_order` centered at
/// `irf_center_bin` with the given full width at half maximum; order 1 is
/// a plain Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentConfig {
    pub num_bins: usize,
    pub bin_width_ns: f64,
    pub irf_center_bin: usize,
    pub irf_fwhm_ns: f64,
    pub irf_order: u32,
}

impl Default for InstrumentConfig {
    fn default() -> Self {
        InstrumentConfig {
            num_bins: 256,
            bin_width_ns: 0.03906,
            irf_center_bin: 14,
            irf_fwhm_ns: 0.167,
            irf_order: 1,
        }
    }
}

impl InstrumentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::InvalidConfig("num_bins must be >= 2".into()));
        }
        if !(self.bin_width_ns > 0.0) {
            return Err(Error::InvalidConfig("bin_width_ns must be > 0".into()));
        }
        if self.irf_center_bin >= self.num_bins {
            return Err(Error::InvalidConfig(format!(
                "irf_center_bin {} out of range for {} bins",
                self.irf_center_bin, self.num_bins
            )));
        }
        if !(self.irf_fwhm_ns > 0.0) {
            return Err(Error::InvalidConfig("irf_fwhm_ns must be > 0".into()));
        }
        if self.irf_order < 1 {
            return Err(Error::InvalidConfig("irf_order must be >= 1".into()));
        }
        Ok(())
    }

    /// Record length in nanoseconds.
    pub fn window_ns(&self) -> f64 {
        self.num_bins as f64 * self.bin_width_ns
    }
}

/// One exponential component of a decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayComponent {
    /// Amplitude fraction; all fractions of a decay sum to 1.
    pub fraction: f64,
    pub lifetime_ns: f64,
}

/// Ground-truth generative parameters for one decay.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayParams {
    pub components: Vec<DecayComponent>,
    /// Peak photon count of the noiseless decay.
    pub peak_count: u32,
}

impl DecayParams {
    pub fn mono(lifetime_ns: f64, peak_count: u32) -> Self {
        DecayParams {
            components: vec![DecayComponent {
                fraction: 1.0,
                lifetime_ns,
            }],
            peak_count,
        }
    }

    /// Bi-exponential decay where `alpha` weights `tau1_ns` and
    /// `1 - alpha` weights `tau2_ns`.
    pub fn bi(alpha: f64, tau1_ns: f64, tau2_ns: f64, peak_count: u32) -> Self {
        DecayParams {
            components: vec![
                DecayComponent {
                    fraction: alpha,
                    lifetime_ns: tau1_ns,
                },
                DecayComponent {
                    fraction: 1.0 - alpha,
                    lifetime_ns: tau2_ns,
                },
            ],
            peak_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidParams("decay needs >= 1 component".into()));
        }
        let sum: f64 = self.components.iter().map(|c| c.fraction).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "amplitude fractions sum to {sum}, expected 1"
            )));
        }
        for c in &self.components {
            if c.fraction < 0.0 {
                return Err(Error::InvalidParams("negative amplitude fraction".into()));
            }
            if !(c.lifetime_ns > 0.0) {
                return Err(Error::InvalidParams("lifetimes must be > 0".into()));
            }
        }
        if self.peak_count < 1 {
            return Err(Error::InvalidParams("peak_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// A histogram together with its ground-truth label and the generative
/// parameters it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDecay {
    pub histogram: Histogram,
    pub label: LifetimePair,
    pub params: DecayParams,
}

/// Synthetic IRF evaluated at integer bin indices, unit peak value at the
/// center bin.
pub fn gen_irf(cfg: &InstrumentConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let fwhm_bins = cfg.irf_fwhm_ns / cfg.bin_width_ns;
    let order = cfg.irf_order;
    // The exponent normalizer makes the curve cross 1/2 at exactly
    // center +/- fwhm/2 for every order.
    let k = 2.0 * (0.5 * std::f64::consts::LN_2).powf(1.0 / (2.0 * order as f64)) / fwhm_bins;
    let center = cfg.irf_center_bin as f64;
    Ok((0..cfg.num_bins)
        .map(|t| {
            let u = (t as f64 - center) * k;
            (-2.0 * u.powi(2 * order as i32)).exp()
        })
        .collect())
}

/// Multi-exponential decay density sampled at integer bin indices;
/// entry 0 is always 1 because the fractions sum to 1.
pub fn gen_pdf(params: &DecayParams, cfg: &InstrumentConfig) -> Result<Vec<f64>> {
    params.validate()?;
    cfg.validate()?;
    Ok((0..cfg.num_bins)
        .map(|t| {
            let time = t as f64 * cfg.bin_width_ns;
            params
                .components
                .iter()
                .map(|c| c.fraction * (-time / c.lifetime_ns).exp())
                .sum()
        })
        .collect())
}

/// Unit-sum IRF trimmed to its numerically significant support, ready for
/// convolution.
#[derive(Debug, Clone)]
pub struct IrfKernel {
    taps: Vec<f64>,
    offset: usize,
    num_bins: usize,
}

/// Taps below this fraction of the peak contribute nothing at f64
/// precision and are dropped to shorten the convolution.
const IRF_SUPPORT_CUTOFF: f64 = 1e-20;

impl IrfKernel {
    pub fn new(cfg: &InstrumentConfig) -> Result<Self> {
        let curve = gen_irf(cfg)?;
        let sum: f64 = curve.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Degenerate("IRF sums to zero".into()));
        }
        let peak = curve.iter().cloned().fold(0.0, f64::max);
        let cutoff = peak * IRF_SUPPORT_CUTOFF;
        let lo = curve.iter().position(|&v| v > cutoff).unwrap_or(0);
        let hi = curve.iter().rposition(|&v| v > cutoff).unwrap_or(0);
        Ok(IrfKernel {
            taps: curve[lo..=hi].iter().map(|&v| v / sum).collect(),
            offset: lo,
            num_bins: cfg.num_bins,
        })
    }

    /// Causal linear convolution with `signal`, truncated to the record
    /// length. `signal` must have the instrument's bin count.
    pub fn convolve(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.num_bins {
            return Err(Error::ShapeMismatch(format!(
                "signal length {} != {} bins",
                signal.len(),
                self.num_bins
            )));
        }
        let mut out = vec![0.0; self.num_bins];
        for (t, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &tap) in self.taps.iter().enumerate() {
                let k = self.offset + j;
                if k > t {
                    break;
                }
                acc += tap * signal[t - k];
            }
            *slot = acc;
        }
        Ok(out)
    }

    /// Centroid of the kernel in bin units (absolute bin coordinate).
    pub fn centroid_bins(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &tap) in self.taps.iter().enumerate() {
            num += (self.offset + j) as f64 * tap;
            den += tap;
        }
        num / den
    }
}

/// Noiseless decay curve: IRF-convolved density rescaled so the maximum
/// equals the peak photon count.
pub fn noiseless_decay(params: &DecayParams, cfg: &InstrumentConfig) -> Result<Vec<f64>> {
    let irf = IrfKernel::new(cfg)?;
    let pdf = gen_pdf(params, cfg)?;
    let mut curve = irf.convolve(&pdf)?;
    let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Degenerate(
            "noiseless decay has no positive maximum".into(),
        ));
    }
    let scale = params.peak_count as f64 / max;
    for v in &mut curve {
        *v *= scale;
    }
    Ok(curve)
}

/// Whether the per-bin sampling step draws Poisson counts or passes the
/// noiseless means through (rounded); the latter exists for tests that
/// pin the rescaling contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Poisson,
    None,
}

/// Optional knobs for [`synthesize_decay_with`].
#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    /// Uniform background level added to every bin's noiseless mean,
    /// in photons per bin.
    pub background: f64,
    pub noise: NoiseMode,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            background: 0.0,
            noise: NoiseMode::Poisson,
        }
    }
}

/// Synthesize one noisy histogram; deterministic for a given seed.
pub fn synthesize_decay(params: &DecayParams, cfg: &InstrumentConfig, seed: u64) -> Result<Histogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthesize_decay_with(params, cfg, &mut rng, &SynthOptions::default())
}

/// Synthesize one histogram drawing randomness from the caller's stream.
pub fn synthesize_decay_with(
    params: &DecayParams,
    cfg: &InstrumentConfig,
    rng: &mut ChaCha8Rng,
    opts: &SynthOptions,
) -> Result<Histogram> {
    if opts.background < 0.0 {
        return Err(Error::InvalidParams("background must be >= 0".into()));
    }
    let curve = noiseless_decay(params, cfg)?;
    let counts = curve
        .iter()
        .map(|&mean| {
            let mean = mean + opts.background;
            let c = match opts.noise {
                NoiseMode::Poisson => poisson_draw(rng, mean),
                NoiseMode::None => mean.round() as u64,
            };
            u32::try_from(c).map_err(|_| Error::Numeric("photon count exceeds u32".into()))
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok(Histogram::new(counts, cfg.bin_width_ns))
}

/// Amplitude- and intensity-averaged lifetimes of a component mixture:
/// the amplitude average weights lifetimes by fraction, the intensity
/// average weights them by their share of emitted photons.
pub fn lifetime_pair(components: &[DecayComponent]) -> LifetimePair {
    let wt: f64 = components.iter().map(|c| c.fraction * c.lifetime_ns).sum();
    let wt2: f64 = components
        .iter()
        .map(|c| c.fraction * c.lifetime_ns * c.lifetime_ns)
        .sum();
    LifetimePair {
        tau_a: wt,
        tau_i: wt2 / wt,
    }
}

/// Lifetime labels implied by the generative parameters.
pub fn tau_labels(params: &DecayParams) -> LifetimePair {
    lifetime_pair(&params.components)
}

/// Evaluation photon-count brackets; peak counts are drawn uniformly
/// within the bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhotonRegime {
    /// Peak counts in [1000, 5000].
    High,
    /// Peak counts in [100, 1000].
    Mid,
    /// Peak counts in [10, 100].
    Low,
}

impl PhotonRegime {
    pub fn bounds(self) -> (u32, u32) {
        match self {
            PhotonRegime::High => (1000, 5000),
            PhotonRegime::Mid => (100, 1000),
            PhotonRegime::Low => (10, 100),
        }
    }
}

impl std::str::FromStr for PhotonRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(PhotonRegime::High),
            "mid" => Ok(PhotonRegime::Mid),
            "low" => Ok(PhotonRegime::Low),
            other => Err(Error::InvalidConfig(format!(
                "unknown photon regime '{other}' (expected high|mid|low)"
            ))),
        }
    }
}

/// Recipe for a labeled dataset of shuffled mono- and bi-exponential
/// decays.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub size: usize,
    /// Fraction of records that are mono-exponential (rounded to a count).
    pub mono_fraction: f64,
    pub mono_tau_ns: (f64, f64),
    pub bi_tau1_ns: (f64, f64),
    pub bi_tau2_ns: (f64, f64),
    pub bi_alpha: (f64, f64),
    pub peak_counts: (u32, u32),
    pub background: f64,
    pub seed: u64,
    pub instrument: InstrumentConfig,
}

impl DatasetSpec {
    /// Standard parameter ranges with a training-wide peak-count draw of
    /// [10, 5000] photons.
    pub fn new(size: usize, seed: u64) -> Self {
        DatasetSpec {
            size,
            mono_fraction: 0.5,
            mono_tau_ns: (0.1, 5.0),
            bi_tau1_ns: (0.1, 0.5),
            bi_tau2_ns: (1.0, 3.0),
            bi_alpha: (0.0, 1.0),
            peak_counts: (10, 5000),
            background: 0.0,
            seed,
            instrument: InstrumentConfig::default(),
        }
    }

    /// Same ranges restricted to one evaluation photon regime.
    pub fn with_regime(size: usize, seed: u64, regime: PhotonRegime) -> Self {
        let mut spec = DatasetSpec::new(size, seed);
        spec.peak_counts = regime.bounds();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 1 {
            return Err(Error::InvalidParams("dataset size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mono_fraction) {
            return Err(Error::InvalidParams("mono_fraction must be in [0, 1]".into()));
        }
        for (name, (lo, hi)) in [
            ("mono_tau_ns", self.mono_tau_ns),
            ("bi_tau1_ns", self.bi_tau1_ns),
            ("bi_tau2_ns", self.bi_tau2_ns),
            ("bi_alpha", self.bi_alpha),
        ] {
            if lo > hi {
                return Err(Error::InvalidParams(format!("inverted range for {name}")));
            }
        }
        if self.mono_tau_ns.0 <= 0.0 || self.bi_tau1_ns.0 <= 0.0 || self.bi_tau2_ns.0 <= 0.0 {
            return Err(Error::InvalidParams("lifetime ranges must be positive".into()));
        }
        if self.bi_alpha.0 < 0.0 || self.bi_alpha.1 > 1.0 {
            return Err(Error::InvalidParams("alpha range must be within [0, 1]".into()));
        }
        if self.peak_counts.0 > self.peak_counts.1 || self.peak_counts.0 < 1 {
            return Err(Error::InvalidParams("bad peak-count range".into()));
        }
        if self.background < 0.0 {
            return Err(Error::InvalidParams("background must be >= 0".into()));
        }
        self.instrument.validate()
    }

    /// Number of mono-exponential records before shuffling.
    pub fn mono_count(&self) -> usize {
        (self.size as f64 * self.mono_fraction).round() as usize
    }
}

/// Independent RNG stream for one record of a seeded batch. Stream 0 is
/// reserved for batch-level draws (the shuffle).
pub fn record_rng(seed: u64, record: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(record.wrapping_add(1));
    rng
}

/// Generate a labeled dataset: parameters drawn uniformly per record,
/// decays synthesized independently, mono and bi records shuffled
/// together. Byte-identical output for a given spec regardless of worker
/// count.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledDecay>> {
    spec.validate()?;
    let n_mono = spec.mono_count();
    let opts = SynthOptions {
        background: spec.background,
        noise: NoiseMode::Poisson,
    };
    let records = exec::map_indexed(spec.size, |i| {
        let mut rng = record_rng(spec.seed, i as u64);
        // Draw order is fixed: lifetimes (and alpha for bi), then peak
        // count, then the Poisson stream.
        let params = if i < n_mono {
            let tau = rng.gen_range(spec.mono_tau_ns.0..=spec.mono_tau_ns.1);
            let peak = rng.gen_range(spec.peak_counts.0..=spec.peak_counts.1);
            DecayParams::mono(tau, peak)
        } else {
            let tau1 = rng.gen_range(spec.bi_tau1_ns.0..=spec.bi_tau1_ns.1);
            let tau2 = rng.gen_range(spec.bi_tau2_ns.0..=spec.bi_tau2_ns.1);
            let alpha = rng.gen_range(spec.bi_alpha.0..=spec.bi_alpha.1);
            let peak = rng.gen_range(spec.peak_counts.0..=spec.peak_counts.1);
            DecayParams::bi(alpha, tau1, tau2, peak)
        };
        let histogram = synthesize_decay_with(&params, &spec.instrument, &mut rng, &opts)?;
        let label = tau_labels(&params);
        Ok(LabeledDecay {
            histogram,
            label,
            params,
        })
    });
    let mut records = records.into_iter().collect::<Result<Vec<_>>>()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shuffle_rng.set_stream(0);
    // Fisher-Yates, back to front.
    for i in (1..records.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        records.swap(i, j);
    }
    Ok(records)
}

// ---------------------------------------------------------------------
// Exact Poisson sampling: cumulative inversion for small means, PTRS
// transformed rejection for large ones.
// ---------------------------------------------------------------------

const POISSON_INVERSION_LIMIT: f64 = 30.0;

/// Draw one Poisson count with the given mean.
pub fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < POISSON_INVERSION_LIMIT {
        poisson_inversion(rng, mean)
    } else {
        poisson_ptrs(rng, mean)
    }
}

fn poisson_inversion(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let u: f64 = rng.gen();
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cum = p;
    while u > cum {
        k += 1;
        p *= mean / k as f64;
        cum += p;
        // Guard against the loop outrunning f64 resolution deep in the
        // tail (cum stalls just below 1).
        if k > 1000 {
            break;
        }
    }
    k
}

/// Transformed-rejection sampler for mean >= ~10 (Hoermann's PTRS).
fn poisson_ptrs(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
        let rhs = k * loglam - mean - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// ln(k!) — table-free for large k via a Stirling series, cumulative sum
/// for small k.
fn ln_factorial(k: u64) -> f64 {
    if k < 2 {
        return 0.0;
    }
    if k < 128 {
        let mut acc = 0.0;
        for i in 2..=k {
            acc += (i as f64).ln();
        }
        return acc;
    }
    let n = k as f64;
    let n2 = n * n;
    // Stirling with three correction terms; error < 1e-16 for k >= 128.
    (n + 0.5) * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * n)
        - 1.0 / (360.0 * n * n2)
        + 1.0 / (1260.0 * n * n2 * n2)
}
