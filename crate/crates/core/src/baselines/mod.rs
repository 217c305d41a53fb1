//! Classical lifetime estimators used as reference points: center-of-mass,
//! phasor projection, and iterative least-squares curve fitting.

pub mod cmm;
pub mod nlsf;
pub mod phasor;

pub use cmm::{cmm_lifetime, CmmOptions};
pub use nlsf::{nlsf_fit, FitResult, NlsfOptions};
pub use phasor::{
    fundamental_omega, mono_phasor_point, phasor_coords, phasor_lifetime, Phasor,
};
