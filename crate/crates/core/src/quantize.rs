//! Two's-complement fixed-point emulation.
//!
//! A format with `I` integer bits (sign included) and `F` fractional bits
//! stores a real value `x` as the integer `round(x * 2^F)` clamped to
//! `[-2^(I+F-1), 2^(I+F-1) - 1]`. Rounding is half away from zero
//! everywhere: at encode time and inside the requantization shift that
//! follows an integer multiply. Arithmetic between encodes runs in widened
//! integers, so each element sees exactly one rounding and one saturation.

use crate::error::{Error, Result};

/// Fixed-point format descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QFormat {
    pub int_bits: u32,
    pub frac_bits: u32,
}

/// 20-bit parameter format: values in [-512, 512) at 2^-10 resolution.
pub const Q10_10: QFormat = QFormat {
    int_bits: 10,
    frac_bits: 10,
};

/// 32-bit feature-map format: values in [-32768, 32768) at 2^-16
/// resolution.
pub const Q16_16: QFormat = QFormat {
    int_bits: 16,
    frac_bits: 16,
};

impl QFormat {
    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self> {
        let f = QFormat {
            int_bits,
            frac_bits,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.int_bits + self.frac_bits;
        if self.int_bits < 1 {
            return Err(Error::Quantize("need at least 1 integer (sign) bit".into()));
        }
        if !(2..=48).contains(&total) {
            return Err(Error::Quantize(format!(
                "total width {total} outside supported 2..=48 bits"
            )));
        }
        Ok(())
    }

    pub fn total_bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }

    /// Scale factor `2^F`.
    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    pub fn raw_min(&self) -> i64 {
        -(1i64 << (self.total_bits() - 1))
    }

    pub fn raw_max(&self) -> i64 {
        (1i64 << (self.total_bits() - 1)) - 1
    }

    /// Smallest representable step.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Encode a real value, saturating silently.
    pub fn encode(&self, x: f64) -> i64 {
        self.encode_tracked(x, &mut SaturationCounter::default())
    }

    /// Encode a real value, counting the element and whether it clipped.
    pub fn encode_tracked(&self, x: f64, sat: &mut SaturationCounter) -> i64 {
        debug_assert!(!x.is_nan());
        sat.total += 1;
        // f64::round is half away from zero, matching the contract.
        let scaled = (x * self.scale()).round();
        if scaled < self.raw_min() as f64 {
            sat.clipped += 1;
            return self.raw_min();
        }
        if scaled > self.raw_max() as f64 {
            sat.clipped += 1;
            return self.raw_max();
        }
        scaled as i64
    }

    /// Encode, refusing non-finite input.
    pub fn try_encode(&self, x: f64, sat: &mut SaturationCounter) -> Result<i64> {
        if !x.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot quantize non-finite value {x}"
            )));
        }
        Ok(self.encode_tracked(x, sat))
    }

    pub fn decode(&self, raw: i64) -> f64 {
        raw as f64 / self.scale()
    }

    /// Clamp a wide intermediate into this format's raw range, counting
    /// the element and whether it clipped.
    pub fn saturate(&self, v: i128, sat: &mut SaturationCounter) -> i64 {
        sat.total += 1;
        if v < self.raw_min() as i128 {
            sat.clipped += 1;
            return self.raw_min();
        }
        if v > self.raw_max() as i128 {
            sat.clipped += 1;
            return self.raw_max();
        }
        v as i64
    }

    /// Encode a slice, counting saturation.
    pub fn encode_slice(&self, xs: &[f64], sat: &mut SaturationCounter) -> Result<Vec<i64>> {
        xs.iter().map(|&x| self.try_encode(x, sat)).collect()
    }

    pub fn decode_slice(&self, raws: &[i64]) -> Vec<f64> {
        raws.iter().map(|&r| self.decode(r)).collect()
    }
}

impl std::fmt::Display for QFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}.{}", self.int_bits, self.frac_bits)
    }
}

/// Running clip statistics for one quantization pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaturationCounter {
    pub clipped: u64,
    pub total: u64,
}

impl SaturationCounter {
    pub fn merge(&mut self, other: &SaturationCounter) {
        self.clipped += other.clipped;
        self.total += other.total;
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }
}

/// Divide by `2^bits` rounding half away from zero; exact integer
/// arithmetic throughout.
pub fn rounding_shift(v: i128, bits: u32) -> i128 {
    if bits == 0 {
        return v;
    }
    let half = 1i128 << (bits - 1);
    if v >= 0 {
        (v + half) >> bits
    } else {
        -((-v + half) >> bits)
    }
}

/// Multiply a feature-map raw value by a parameter raw value, add a
/// parameter-format shift, and land back in the feature-map format:
/// one rounding shift, one saturation.
///
/// `x` carries `fm.frac_bits` fractional bits, `scale` and `shift` carry
/// `param.frac_bits`; the product has both, the shift term is aligned up,
/// and the rounding shift removes the parameter fraction.
pub fn affine_requantize(
    x: i64,
    scale: i64,
    shift: i64,
    fm: QFormat,
    param: QFormat,
    sat: &mut SaturationCounter,
) -> i64 {
    let product = x as i128 * scale as i128;
    let shift_aligned = (shift as i128) << fm.frac_bits;
    let v = rounding_shift(product + shift_aligned, param.frac_bits);
    fm.saturate(v, sat)
}

/// Re-express a raw value with `from.frac_bits` fractional bits at
/// `to_frac` bits; exact, so only widening is allowed.
pub fn align_frac(raw: i64, from: QFormat, to_frac: u32) -> i64 {
    debug_assert!(to_frac >= from.frac_bits);
    raw << (to_frac - from.frac_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn format_bounds() {
        assert_eq!(Q10_10.total_bits(), 20);
        assert_eq!(Q10_10.raw_min(), -524_288);
        assert_eq!(Q10_10.raw_max(), 524_287);
        assert_eq!(Q16_16.total_bits(), 32);
        assert_eq!(Q16_16.raw_min(), -(1i64 << 31));
        assert_eq!(Q16_16.raw_max(), (1i64 << 31) - 1);
        assert_eq!(Q10_10.resolution(), 1.0 / 1024.0);
    }

    #[test]
    fn exact_values_roundtrip() {
        let mut sat = SaturationCounter::default();
        for raw in [-524_288i64, -1024, -1, 0, 1, 1024, 524_287] {
            let x = Q10_10.decode(raw);
            assert_eq!(Q10_10.encode_tracked(x, &mut sat), raw);
        }
        assert_eq!(sat.clipped, 0);
    }

    #[test]
    fn worked_encode_examples() {
        // 1.5 at F=10 is exactly representable.
        assert_eq!(Q10_10.encode(1.5), 1536);
        assert_eq!(Q10_10.decode(1536), 1.5);
        // 0.33 * 1024 = 337.92 rounds to 338 -> 0.330078125.
        assert_eq!(Q10_10.encode(0.33), 338);
        assert_eq!(Q10_10.decode(338), 0.330078125);
        // 0.12345 * 1024 = 126.41 rounds to 126 -> 0.123046875.
        assert_eq!(Q10_10.encode(0.12345), 126);
        assert_eq!(Q10_10.decode(126), 0.123046875);
        assert!((Q10_10.decode(126) - 0.12345).abs() <= 1.0 / 2048.0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // 1.5 raw units -> 2; -1.5 -> -2; 2.5 -> 3.
        assert_eq!(Q10_10.encode(1.5 / 1024.0), 2);
        assert_eq!(Q10_10.encode(-1.5 / 1024.0), -2);
        assert_eq!(Q10_10.encode(2.5 / 1024.0), 3);
        assert_eq!(Q10_10.encode(-2.5 / 1024.0), -3);
        assert_eq!(Q10_10.encode(0.49 / 1024.0), 0);
    }

    #[test]
    fn saturation_clamps_and_counts() {
        let mut sat = SaturationCounter::default();
        assert_eq!(Q10_10.encode_tracked(1000.0, &mut sat), 524_287);
        assert_eq!(Q10_10.encode_tracked(-1000.0, &mut sat), -524_288);
        assert_eq!(Q10_10.encode_tracked(0.25, &mut sat), 256);
        assert_eq!(sat.clipped, 2);
        assert_eq!(sat.total, 3);
        assert!((sat.fraction() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut sat = SaturationCounter::default();
        assert!(Q10_10.try_encode(f64::NAN, &mut sat).is_err());
        assert!(Q10_10.try_encode(f64::INFINITY, &mut sat).is_err());
    }

    #[test]
    fn rounding_shift_matches_real_division() {
        assert_eq!(rounding_shift(3, 1), 2); // 1.5 -> 2
        assert_eq!(rounding_shift(-3, 1), -2); // -1.5 -> -2
        assert_eq!(rounding_shift(5, 2), 1); // 1.25 -> 1
        assert_eq!(rounding_shift(6, 2), 2); // 1.5 -> 2
        assert_eq!(rounding_shift(-6, 2), -2);
        assert_eq!(rounding_shift(7, 0), 7);
    }

    #[test]
    fn affine_requantize_agrees_with_float_within_one_step() {
        let mut sat = SaturationCounter::default();
        let x = Q16_16.encode(1.3);
        let scale = Q10_10.encode(0.7);
        let shift = Q10_10.encode(-0.2);
        let y = affine_requantize(x, scale, shift, Q16_16, Q10_10, &mut sat);
        let expect = 1.3 * 0.7 + (-0.2);
        assert!((Q16_16.decode(y) - expect).abs() < 2.0 * Q16_16.resolution() + 0.7 * Q10_10.resolution());
        assert_eq!(sat.clipped, 0);
    }

    #[test]
    fn affine_requantize_saturates_once_at_the_end() {
        let mut sat = SaturationCounter::default();
        // 30000 * 4 = 120000 overflows the Q16.16 value range [-32768, 32768).
        let x = Q16_16.encode(30000.0);
        let scale = Q10_10.encode(4.0);
        let y = affine_requantize(x, scale, 0, Q16_16, Q10_10, &mut sat);
        assert_eq!(y, Q16_16.raw_max());
        assert_eq!(sat.clipped, 1);
    }

    #[test]
    fn frac_alignment_is_exact() {
        let w = Q10_10.encode(-3.25);
        let aligned = align_frac(w, Q10_10, 16);
        assert_eq!(aligned, -3 * 65536 - 65536 / 4);
        assert_eq!(Q16_16.decode(aligned), -3.25);
    }

    #[test]
    fn invalid_formats_are_rejected() {
        assert!(QFormat::new(0, 10).is_err());
        assert!(QFormat::new(40, 40).is_err());
        assert!(QFormat::new(1, 1).is_ok());
    }

    proptest! {
        #[test]
        fn raw_values_roundtrip_exactly(raw in -524_288i64..=524_287) {
            let x = Q10_10.decode(raw);
            prop_assert_eq!(Q10_10.encode(x), raw);
        }

        #[test]
        fn encode_error_is_at_most_half_a_step(x in -511.9f64..511.9) {
            let y = Q10_10.decode(Q10_10.encode(x));
            prop_assert!((y - x).abs() <= 0.5 / 1024.0 + 1e-12);
        }

        #[test]
        fn encode_is_monotone(a in -600.0f64..600.0, b in -600.0f64..600.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(Q10_10.encode(lo) <= Q10_10.encode(hi));
        }

        #[test]
        fn rounding_shift_error_is_at_most_half(v in -1_000_000i128..1_000_000, bits in 0u32..20) {
            let got = rounding_shift(v, bits) as f64;
            let real = v as f64 / (1u64 << bits) as f64;
            prop_assert!((got - real).abs() <= 0.5 + 1e-9);
        }
    }
}
