//! Nonlinear least-squares curve fitting with a Levenberg–Marquardt
//! loop.
//!
//! The model is the same physics forward model the synthesizer uses:
//! an instrument-response-convolved multi-exponential,
//! `m_t = A * (irf (*) sum_j a_j exp(-t*dt/tau_j))_t`, fit by
//! minimizing the unweighted sum of squared residuals against the
//! measured counts.
//!
//! Internally the fit runs over unconstrained parameters: `ln tau_j`
//! keeps lifetimes positive, a logit keeps the two-component amplitude
//! split inside (0, 1), and `ln A` keeps the scale positive. One or two
//! components are supported. The Jacobian is taken by forward
//! differences and the damped normal equations are solved directly
//! (at most four unknowns).

use crate::decay::{DecayComponent, DecayParams, InstrumentConfig, IrfKernel};
use crate::error::{Error, Result};
use crate::histogram::{Histogram, LifetimePair};

/// Fewest total photons the fitter accepts; below this the normal
/// equations are dominated by shot noise and the result is meaningless.
pub const MIN_PHOTONS: u64 = 50;

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-12;

/// Options for [`nlsf_fit`].
#[derive(Debug, Clone)]
pub struct NlsfOptions {
    /// Number of exponential components (1 or 2). Ignored when `init`
    /// is given.
    pub components: usize,
    /// Explicit starting point; `None` uses the built-in defaults
    /// (mono: tau = 1 ns; bi: tau = 0.3 and 2.0 ns split evenly), with
    /// the amplitude seeded from the data peak.
    pub init: Option<DecayParams>,
    pub max_iterations: usize,
    /// Relative residual-change threshold that declares convergence.
    pub tolerance: f64,
}

impl Default for NlsfOptions {
    fn default() -> Self {
        NlsfOptions {
            components: 1,
            init: None,
            max_iterations: 200,
            tolerance: 1e-8,
        }
    }
}

/// Outcome of one curve fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Fitted decay, components sorted by ascending lifetime;
    /// `peak_count` is the fitted model's rounded maximum.
    pub params: DecayParams,
    /// Euclidean norm of the final residual vector.
    pub residual_norm: f64,
    /// Outer Levenberg–Marquardt iterations executed.
    pub iterations: usize,
    /// Whether the relative residual change fell below the tolerance
    /// (or no damped step could improve further).
    pub converged: bool,
    /// Accepted sum-of-squares values, starting with the initial point.
    pub ssr_history: Vec<f64>,
}

impl FitResult {
    /// The two average lifetimes implied by the fitted components.
    pub fn lifetimes(&self) -> LifetimePair {
        crate::decay::lifetime_pair(&self.params.components)
    }
}

/// Internal parameterization: `ln tau` per component, one logit for the
/// two-component split, `ln A` last.
fn theta_len(k: usize) -> usize {
    k + usize::from(k == 2) + 1
}

fn unpack(theta: &[f64], k: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let taus: Vec<f64> = theta[..k].iter().map(|&t| t.exp()).collect();
    let fracs = if k == 2 {
        let a = 1.0 / (1.0 + (-theta[k]).exp());
        vec![a, 1.0 - a]
    } else {
        vec![1.0]
    };
    let amp = theta[theta.len() - 1].exp();
    (taus, fracs, amp)
}

fn model_curve(
    irf: &IrfKernel,
    cfg: &InstrumentConfig,
    taus: &[f64],
    fracs: &[f64],
    amp: f64,
) -> Result<Vec<f64>> {
    let density: Vec<f64> = (0..cfg.num_bins)
        .map(|t| {
            let time = t as f64 * cfg.bin_width_ns;
            taus.iter()
                .zip(fracs)
                .map(|(&tau, &a)| a * (-time / tau).exp())
                .sum::<f64>()
        })
        .collect();
    let mut curve = irf.convolve(&density)?;
    for v in &mut curve {
        *v *= amp;
    }
    Ok(curve)
}

fn ssr(counts: &[u32], model: &[f64]) -> f64 {
    counts
        .iter()
        .zip(model)
        .map(|(&c, &m)| {
            let r = c as f64 - m;
            r * r
        })
        .sum()
}

/// Solve `a x = b` in place by Gaussian elimination with partial
/// pivoting; `None` if the system is numerically singular.
fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| {
            a[p][col]
                .abs()
                .partial_cmp(&a[q][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
        if !x[col].is_finite() {
            return None;
        }
    }
    Some(x)
}

fn initial_theta(
    hist: &Histogram,
    cfg: &InstrumentConfig,
    irf: &IrfKernel,
    opts: &NlsfOptions,
) -> Result<(Vec<f64>, usize)> {
    let (taus, fracs, peak_target) = match &opts.init {
        Some(p) => {
            p.validate()?;
            let mut comps = p.components.clone();
            comps.sort_by(|x, y| x.lifetime_ns.partial_cmp(&y.lifetime_ns).unwrap());
            (
                comps.iter().map(|c| c.lifetime_ns).collect::<Vec<_>>(),
                comps.iter().map(|c| c.fraction).collect::<Vec<_>>(),
                p.peak_count as f64,
            )
        }
        None => match opts.components {
            1 => (vec![1.0], vec![1.0], peak_value(hist)),
            2 => (vec![0.3, 2.0], vec![0.5, 0.5], peak_value(hist)),
            other => {
                return Err(Error::InvalidParams(format!(
                    "fits support 1 or 2 components, got {other}"
                )))
            }
        },
    };
    let k = taus.len();
    if !(1..=2).contains(&k) {
        return Err(Error::InvalidParams(format!(
            "fits support 1 or 2 components, got {k}"
        )));
    }

    let mut theta = Vec::with_capacity(theta_len(k));
    for &tau in &taus {
        theta.push(tau.ln());
    }
    if k == 2 {
        let a = fracs[0].clamp(1e-6, 1.0 - 1e-6);
        theta.push((a / (1.0 - a)).ln());
    }
    // Map the target peak height to the amplitude through the model's
    // own peak at the starting shape.
    let unit = model_curve(irf, cfg, &taus, &fracs, 1.0)?;
    let unit_max = unit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(unit_max > 0.0) {
        return Err(Error::Numeric("starting model has no positive peak".into()));
    }
    let amp = (peak_target / unit_max).max(f64::MIN_POSITIVE);
    theta.push(amp.ln());
    Ok((theta, k))
}

fn peak_value(hist: &Histogram) -> f64 {
    hist.counts[hist.peak_bin()].max(1) as f64
}

/// Fit an instrument-convolved multi-exponential to a count histogram.
pub fn nlsf_fit(
    hist: &Histogram,
    cfg: &InstrumentConfig,
    opts: &NlsfOptions,
) -> Result<FitResult> {
    if hist.is_merged() {
        return Err(Error::InvalidParams(
            "curve fitting expects a uniform-width histogram".into(),
        ));
    }
    if hist.counts.len() != cfg.num_bins {
        return Err(Error::ShapeMismatch(format!(
            "histogram has {} bins, instrument expects {}",
            hist.counts.len(),
            cfg.num_bins
        )));
    }
    if hist.total() < MIN_PHOTONS {
        return Err(Error::Degenerate(format!(
            "{} photons is below the fitting minimum of {MIN_PHOTONS}",
            hist.total()
        )));
    }
    if opts.max_iterations == 0 || !(opts.tolerance > 0.0) {
        return Err(Error::InvalidConfig(
            "fit needs max_iterations >= 1 and a positive tolerance".into(),
        ));
    }

    let irf = IrfKernel::new(cfg)?;
    let (mut theta, k) = initial_theta(hist, cfg, &irf, opts)?;
    let np = theta.len();

    let eval = |theta: &[f64]| -> Result<(Vec<f64>, f64)> {
        let (taus, fracs, amp) = unpack(theta, k);
        let model = model_curve(&irf, cfg, &taus, &fracs, amp)?;
        let s = ssr(&hist.counts, &model);
        Ok((model, s))
    };

    let (mut model, mut current_ssr) = eval(&theta)?;
    if !current_ssr.is_finite() {
        return Err(Error::Numeric(
            "starting point produces a non-finite residual".into(),
        ));
    }
    let mut history = vec![current_ssr];
    let mut lambda = LAMBDA_INIT;
    let mut converged = false;
    let mut iterations = 0;

    'outer: for _ in 0..opts.max_iterations {
        iterations += 1;

        // Forward-difference Jacobian of the model; with residuals
        // r = h - m the Gauss-Newton step solves
        // (J^T J + lambda diag) step = J^T r.
        let mut jac: Vec<Vec<f64>> = Vec::with_capacity(np);
        for p in 0..np {
            let delta = 1e-6 * theta[p].abs().max(1.0);
            let mut shifted = theta.clone();
            shifted[p] += delta;
            let (m2, _) = eval(&shifted)?;
            jac.push(
                m2.iter()
                    .zip(&model)
                    .map(|(&a, &b)| (a - b) / delta)
                    .collect(),
            );
        }

        // Normal equations: (J^T J + lambda diag) step = J^T r.
        let mut jtj = vec![vec![0.0; np]; np];
        let mut jtr = vec![0.0; np];
        for p in 0..np {
            for q in p..np {
                let dot: f64 = jac[p].iter().zip(&jac[q]).map(|(&a, &b)| a * b).sum();
                jtj[p][q] = dot;
                jtj[q][p] = dot;
            }
            jtr[p] = jac[p]
                .iter()
                .zip(hist.counts.iter().zip(&model))
                .map(|(&j, (&c, &m))| j * (c as f64 - m))
                .sum();
        }
        if jtr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite fit gradient".into()));
        }

        loop {
            let mut damped = jtj.clone();
            for p in 0..np {
                damped[p][p] += lambda * jtj[p][p].max(1e-12);
            }
            let mut rhs = jtr.clone();
            let step = solve_linear(&mut damped, &mut rhs);

            let accepted = match step {
                None => None,
                Some(step) => {
                    let cand: Vec<f64> =
                        theta.iter().zip(&step).map(|(&t, &s)| t + s).collect();
                    match eval(&cand) {
                        Ok((m, s)) if s.is_finite() && s < current_ssr => Some((cand, m, s)),
                        _ => None,
                    }
                }
            };

            match accepted {
                Some((cand, m, s)) => {
                    theta = cand;
                    model = m;
                    let previous = current_ssr;
                    current_ssr = s;
                    history.push(s);
                    lambda = (lambda / 10.0).max(LAMBDA_MIN);
                    if previous - s < opts.tolerance * previous {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        // No damped step improves: stationary point.
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let (taus, fracs, _) = unpack(&theta, k);
    let mut components: Vec<DecayComponent> = taus
        .iter()
        .zip(&fracs)
        .map(|(&tau, &a)| DecayComponent {
            fraction: a,
            lifetime_ns: tau,
        })
        .collect();
    // Starved data can leave one component unidentifiable (weight -> 0
    // while its lifetime runs away); such a fit has no usable estimate.
    // A lifetime is only identifiable within a couple of decades of the
    // measurement window, so anything far outside it counts as divergence.
    let window = cfg.num_bins as f64 * cfg.bin_width_ns;
    let (tau_lo, tau_hi) = (cfg.bin_width_ns / 100.0, window * 10.0);
    let pair = crate::decay::lifetime_pair(&components);
    let physical = components
        .iter()
        .all(|c| c.fraction.is_finite() && (tau_lo..=tau_hi).contains(&c.lifetime_ns))
        && pair.tau_a.is_finite()
        && pair.tau_i.is_finite();
    if !physical {
        return Err(Error::Numeric(
            "fit wandered to non-physical parameters".into(),
        ));
    }
    components.sort_by(|x, y| x.lifetime_ns.partial_cmp(&y.lifetime_ns).unwrap());
    let model_peak = model.iter().cloned().fold(0.0, f64::max);
    let peak_count = model_peak.round().clamp(1.0, u32::MAX as f64) as u32;

    Ok(FitResult {
        params: DecayParams {
            components,
            peak_count,
        },
        residual_norm: current_ssr.sqrt(),
        iterations,
        converged,
        ssr_history: history,
    })
}
