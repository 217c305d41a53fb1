//! Time-domain fluorescence-lifetime (FLIM) analysis toolkit.
//!
//! The crate covers the full pipeline from photon-count histograms to
//! average-lifetime estimates:
//!
//! * [`decay`] — synthetic instrument response functions, multi-exponential
//!   decay histograms with Poisson noise, and labeled dataset generation.
//! * [`binning`] — log-scale temporal compression of histograms (geometric
//!   bin widths, exact photon conservation).
//! * [`net`] — FLAN and FLAN+LS, multiplication-free 1-D adder-convolution
//!   networks regressing amplitude- and intensity-averaged lifetimes, with
//!   float and bit-exact fixed-point forward paths.
//! * [`quantize`] — linear fixed-point encode/decode with saturation, used
//!   to emulate quantized on-chip inference in software.
//! * [`train`] — backpropagation with adder-layer surrogate gradients,
//!   RMSProp with per-layer adaptive rescaling, and early stopping.
//! * [`baselines`] — classical estimators: center-of-mass, phasor analysis,
//!   and Levenberg–Marquardt deconvolution fitting.
//! * [`eval`] — synthetic ground-truth image protocol, MSE maps,
//!   accuracy/precision in dB, and latency/throughput benchmarking.
//! * [`io`] — binary container formats for datasets, models, and exported
//!   fixed-point parameters.
//!
//! Batch operations (dataset generation, per-pixel inference, image
//! evaluation) run data-parallel when the `parallel` feature is enabled
//! (default) and fall back to sequential loops otherwise. Results are
//! bitwise identical either way: every reduction uses a fixed summation
//! order regardless of worker count.

pub mod baselines;
pub mod binning;
pub mod decay;
pub mod error;
pub mod eval;
pub mod exec;
pub mod histogram;
pub mod io;
pub mod net;
pub mod quantize;
pub mod train;

pub use error::{Error, Result};
pub use histogram::{Histogram, LifetimePair};
