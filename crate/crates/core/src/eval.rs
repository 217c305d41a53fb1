//! Evaluation harness: synthetic ground-truth images, masked error
//! metrics, decibel accuracy/precision scores, and latency benchmarks.

use std::time::Instant;

use crate::binning::LogBinning;
use crate::decay::{
    record_rng, synthesize_decay_with, tau_labels, DecayParams, InstrumentConfig, LabeledDecay,
    PhotonRegime, SynthOptions,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::histogram::LifetimePair;
use crate::net::fixed::QuantizedNetwork;
use crate::net::Network;
use crate::quantize::SaturationCounter;
use rand::Rng;

/// Recipe for a synthetic ground-truth image: every pixel is a
/// two-component decay whose short-lifetime amplitude ramps linearly
/// down the rows. Row 0 is purely the long component; the bottom row is
/// purely the short one; peak photon counts are drawn uniformly within
/// the regime per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GtImageSpec {
    pub width: usize,
    pub height: usize,
    pub tau_short_ns: f64,
    pub tau_long_ns: f64,
    pub regime: PhotonRegime,
    pub seed: u64,
    pub instrument: InstrumentConfig,
}

impl GtImageSpec {
    pub fn new(width: usize, height: usize, regime: PhotonRegime, seed: u64) -> Self {
        GtImageSpec {
            width,
            height,
            tau_short_ns: 0.3,
            tau_long_ns: 2.5,
            regime,
            seed,
            instrument: InstrumentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image needs width and height >= 1".into()));
        }
        if !(self.tau_short_ns > 0.0 && self.tau_long_ns > self.tau_short_ns) {
            return Err(Error::InvalidConfig(
                "image lifetimes need 0 < short < long".into(),
            ));
        }
        Ok(())
    }

    /// Short-component amplitude of row `y`: 0 at the top row, 1 at the
    /// bottom row (a single-row image is all long component).
    pub fn row_alpha(&self, y: usize) -> f64 {
        if self.height <= 1 {
            0.0
        } else {
            y as f64 / (self.height - 1) as f64
        }
    }

    /// Generative parameters of pixel `(x, y)` minus the photon draw.
    fn pixel_components(&self, y: usize) -> Vec<crate::decay::DecayComponent> {
        let alpha = self.row_alpha(y);
        vec![
            crate::decay::DecayComponent {
                fraction: alpha,
                lifetime_ns: self.tau_short_ns,
            },
            crate::decay::DecayComponent {
                fraction: 1.0 - alpha,
                lifetime_ns: self.tau_long_ns,
            },
        ]
    }
}

impl Default for GtImageSpec {
    fn default() -> Self {
        GtImageSpec::new(256, 256, PhotonRegime::High, 1)
    }
}

/// A synthesized ground-truth image, pixels in row-major order.
#[derive(Debug, Clone)]
pub struct GtImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<LabeledDecay>,
}

impl GtImage {
    pub fn pixel(&self, x: usize, y: usize) -> &LabeledDecay {
        &self.pixels[y * self.width + x]
    }

    pub fn labels(&self) -> Vec<LifetimePair> {
        self.pixels.iter().map(|p| p.label).collect()
    }
}

/// Synthesize a ground-truth image. Each pixel draws from its own RNG
/// stream keyed by the row-major index, so output is byte-identical for
/// a given spec regardless of worker count.
pub fn gen_gt_image(spec: &GtImageSpec) -> Result<GtImage> {
    spec.validate()?;
    let (lo, hi) = spec.regime.bounds();
    let opts = SynthOptions::default();
    let pixels: Vec<Result<LabeledDecay>> = exec::map_indexed(spec.width * spec.height, |idx| {
        let y = idx / spec.width;
        let mut rng = record_rng(spec.seed, idx as u64);
        let peak_count = rng.gen_range(lo..=hi);
        let params = DecayParams {
            components: spec.pixel_components(y),
            peak_count,
        };
        let histogram = synthesize_decay_with(&params, &spec.instrument, &mut rng, &opts)?;
        Ok(LabeledDecay {
            histogram,
            label: tau_labels(&params),
            params,
        })
    });
    let pixels = pixels.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(GtImage {
        width: spec.width,
        height: spec.height,
        pixels,
    })
}

/// Run a float network over every pixel; an optional log-scale binning
/// merges each histogram first (for the compressed-input variant).
pub fn predict_image_float(
    net: &Network,
    image: &GtImage,
    binning: Option<&LogBinning>,
) -> Result<Vec<LifetimePair>> {
    exec::map_slice(&image.pixels, |px| -> Result<LifetimePair> {
        match binning {
            None => net.predict(&px.histogram.counts),
            Some(b) => net.predict(&b.merge(&px.histogram)?.counts),
        }
    })
    .into_iter()
    .collect()
}

/// Fixed-point twin of [`predict_image_float`]; also accumulates the
/// saturation statistics across all pixels.
pub fn predict_image_quantized(
    q: &QuantizedNetwork,
    image: &GtImage,
    binning: Option<&LogBinning>,
) -> Result<(Vec<LifetimePair>, SaturationCounter)> {
    let results: Vec<Result<(LifetimePair, SaturationCounter)>> =
        exec::map_slice(&image.pixels, |px| match binning {
            None => q.predict(&px.histogram.counts),
            Some(b) => q.predict(&b.merge(&px.histogram)?.counts),
        });
    let mut preds = Vec::with_capacity(results.len());
    let mut sat = SaturationCounter::default();
    for r in results {
        let (pair, s) = r?;
        preds.push(pair);
        sat.merge(&s);
    }
    Ok((preds, sat))
}

/// Masked mean squared error against ground truth, one value per
/// lifetime target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseReport {
    pub mse_a: f64,
    pub mse_i: f64,
    /// Pixels included in the means.
    pub evaluated: usize,
    /// Pixels excluded by the mask.
    pub skipped: usize,
}

/// Mean squared error between predictions and ground truth, skipping
/// pixels whose mask entry is false (e.g. gated-out background).
pub fn mse_eval(
    preds: &[LifetimePair],
    truth: &[LifetimePair],
    mask: Option<&[bool]>,
) -> Result<MseReport> {
    if preds.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} ground-truth pixels",
            preds.len(),
            truth.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != preds.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {} pixels",
                m.len(),
                preds.len()
            )));
        }
    }
    let mut sum_a = 0.0;
    let mut sum_i = 0.0;
    let mut evaluated = 0usize;
    for (idx, (p, t)) in preds.iter().zip(truth).enumerate() {
        if let Some(m) = mask {
            if !m[idx] {
                continue;
            }
        }
        sum_a += (p.tau_a - t.tau_a).powi(2);
        sum_i += (p.tau_i - t.tau_i).powi(2);
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Degenerate("every pixel is masked out".into()));
    }
    Ok(MseReport {
        mse_a: sum_a / evaluated as f64,
        mse_i: sum_i / evaluated as f64,
        evaluated,
        skipped: preds.len() - evaluated,
    })
}

/// Decibel accuracy and precision of repeated estimates against a
/// reference value:
///
/// * accuracy  = `20 log10(|mean| / |mean - reference|)`
/// * precision = `20 log10(|mean| / sample std dev)` (n-1 denominator)
///
/// An exact mean (or zero spread) scores positive infinity; a single
/// sample has no spread estimate, so precision is `None`.
pub fn acc_prec_db(values: &[f64], reference: f64) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::Degenerate("no values to score".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in the score set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let acc = if mean == reference {
        f64::INFINITY
    } else {
        20.0 * (mean.abs() / (mean - reference).abs()).log10()
    };
    let prec = if values.len() < 2 {
        None
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        Some(if std == 0.0 {
            f64::INFINITY
        } else {
            20.0 * (mean.abs() / std).log10()
        })
    };
    Ok((acc, prec))
}

/// One latency measurement: the median time to process `batch_size`
/// histograms, and the implied throughput.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    pub latency_ms: f64,
    pub throughput_pixels_per_ms: f64,
    pub workers: usize,
}

/// Worker count the parallel execution helpers will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Time a batch-processing closure: runs it `reps` times and reports
/// the median wall-clock latency. The closure must process exactly
/// `batch_size` items per call.
pub fn bench_batch<F>(mut run: F, batch_size: usize, reps: usize) -> Result<BenchRow>
where
    F: FnMut() -> Result<()>,
{
    if batch_size == 0 || reps == 0 {
        return Err(Error::InvalidConfig(
            "benchmark needs batch_size >= 1 and reps >= 1".into(),
        ));
    }
    let mut times_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if reps % 2 == 1 {
        times_ms[reps / 2]
    } else {
        0.5 * (times_ms[reps / 2 - 1] + times_ms[reps / 2])
    };
    // Zero-duration medians only happen on clock-granularity floors;
    // report the smallest representable positive latency instead of a
    // division by zero.
    let latency_ms = median.max(1e-9);
    Ok(BenchRow {
        batch_size,
        latency_ms,
        throughput_pixels_per_ms: batch_size as f64 / latency_ms,
        workers: worker_count(),
    })
}

/// Median latency of float inference over the first `batch_size`
/// histograms of `inputs`.
pub fn bench_network_float(
    net: &Network,
    inputs: &[Vec<u32>],
    batch_size: usize,
    reps: usize,
) -> Result<BenchRow> {
    if inputs.len() < batch_size {
        return Err(Error::InvalidConfig(format!(
            "benchmark needs {batch_size} inputs, got {}",
            inputs.len()
        )));
    }
    let batch = &inputs[..batch_size];
    bench_batch(
        || {
            exec::map_slice(batch, |counts| net.predict(counts))
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .map(|_| ())
        },
        batch_size,
        reps,
    )
}

/// Median latency of fixed-point inference over the first `batch_size`
/// histograms of `inputs`.
pub fn bench_network_quantized(
    q: &QuantizedNetwork,
    inputs: &[Vec<u32>],
    batch_size: usize,
    reps: usize,
) -> Result<BenchRow> {
    if inputs.len() < batch_size {
        return Err(Error::InvalidConfig(format!(
            "benchmark needs {batch_size} inputs, got {}",
            inputs.len()
        )));
    }
    let batch = &inputs[..batch_size];
    bench_batch(
        || {
            exec::map_slice(batch, |counts| q.predict(counts))
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .map(|_| ())
        },
        batch_size,
        reps,
    )
}

/// CSV rendering of benchmark rows (header included).
pub fn bench_rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("batch_size,latency_ms,throughput_pixels_per_ms,workers\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.batch_size, r.latency_ms, r.throughput_pixels_per_ms, r.workers
        ));
    }
    out
}
