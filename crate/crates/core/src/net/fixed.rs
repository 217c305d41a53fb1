//! Bit-exact integer emulation of the adder network.
//!
//! Parameters are quantized once into a narrow two's-complement format
//! (Q10.10 by default), feature maps into a wider one (Q16.16). The
//! pipeline is pure integer arithmetic: L1 accumulation in i64, the
//! affine map in i128 with one round-half-away-from-zero shift, and one
//! saturating narrowing per output element (the residual block narrows
//! once, after the skip addition). Two runs over the same input produce
//! identical integers, so the emulation doubles as a reference trace
//! for a hardware implementation.

use super::{threshold_gate, AdderConv, AdderDense, Layer, Network, Variant};
use crate::error::{Error, Result};
use crate::histogram::LifetimePair;
use crate::quantize::{rounding_shift, QFormat, SaturationCounter, Q10_10, Q16_16};

/// Integer feature map, raw values in the feature-map format.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedMap {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<i64>,
}

impl FixedMap {
    fn zeros(channels: usize, len: usize) -> Self {
        FixedMap {
            channels,
            len,
            data: vec![0; channels * len],
        }
    }

    #[inline]
    fn at(&self, c: usize, t: usize) -> i64 {
        self.data[c * self.len + t]
    }
}

/// Quantized convolution: weights stored in the parameter format and
/// pre-aligned (left-shifted) to the feature-map format for the L1
/// accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
    pub weights_raw: Vec<i64>,
    weights_aligned: Vec<i64>,
    pub scale_raw: Vec<i64>,
    pub shift_raw: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedDense {
    pub in_features: usize,
    pub out_features: usize,
    pub relu: bool,
    pub weights_raw: Vec<i64>,
    weights_aligned: Vec<i64>,
    pub scale_raw: Vec<i64>,
    pub shift_raw: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixedLayer {
    Conv(FixedConv),
    Residual(FixedConv, FixedConv),
}

/// Integer twin of a float network, frozen to one format pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub variant: Variant,
    pub fm_format: QFormat,
    pub param_format: QFormat,
    pub backbone: Vec<FixedLayer>,
    pub head_a: Vec<FixedDense>,
    pub head_i: Vec<FixedDense>,
    pub gate: u64,
    /// Clipping observed while encoding the parameters.
    pub param_saturation: SaturationCounter,
}

fn quantize_tensor(
    values: &[f64],
    param: QFormat,
    sat: &mut SaturationCounter,
) -> Result<Vec<i64>> {
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::Quantize("non-finite parameter".into()));
            }
            Ok(param.encode_tracked(v, sat))
        })
        .collect()
}

fn align_weights(raw: &[i64], shift_bits: u32) -> Vec<i64> {
    raw.iter().map(|&w| w << shift_bits).collect()
}

fn quantize_conv(
    c: &AdderConv,
    fm: QFormat,
    param: QFormat,
    sat: &mut SaturationCounter,
) -> Result<FixedConv> {
    let shift_bits = fm.frac_bits - param.frac_bits;
    let weights_raw = quantize_tensor(&c.weights, param, sat)?;
    let weights_aligned = align_weights(&weights_raw, shift_bits);
    Ok(FixedConv {
        in_ch: c.in_ch,
        out_ch: c.out_ch,
        kernel: c.kernel,
        stride: c.stride,
        relu: c.relu,
        weights_raw,
        weights_aligned,
        scale_raw: quantize_tensor(&c.scale, param, sat)?,
        shift_raw: quantize_tensor(&c.shift, param, sat)?,
    })
}

fn quantize_dense(
    d: &AdderDense,
    fm: QFormat,
    param: QFormat,
    sat: &mut SaturationCounter,
) -> Result<FixedDense> {
    let shift_bits = fm.frac_bits - param.frac_bits;
    let weights_raw = quantize_tensor(&d.weights, param, sat)?;
    let weights_aligned = align_weights(&weights_raw, shift_bits);
    Ok(FixedDense {
        in_features: d.in_features,
        out_features: d.out_features,
        relu: d.relu,
        weights_raw,
        weights_aligned,
        scale_raw: quantize_tensor(&d.scale, param, sat)?,
        shift_raw: quantize_tensor(&d.shift, param, sat)?,
    })
}

/// Quantize a float network into the given format pair, refusing when
/// more than 1% of parameters clip. The parameter format must not have
/// more fractional bits than the feature-map format (weights are
/// aligned upward by a pure left shift).
pub fn quantize_network(net: &Network, fm: QFormat, param: QFormat) -> Result<QuantizedNetwork> {
    quantize_network_with(net, fm, param, 0.01)
}

/// Quantize with an explicit tolerance on the clipped-parameter
/// fraction (1.0 disables the guard).
pub fn quantize_network_with(
    net: &Network,
    fm: QFormat,
    param: QFormat,
    max_clip_fraction: f64,
) -> Result<QuantizedNetwork> {
    fm.validate()?;
    param.validate()?;
    if param.frac_bits > fm.frac_bits {
        return Err(Error::Quantize(format!(
            "parameter format {param} has more fractional bits than feature-map format {fm}"
        )));
    }
    let mut sat = SaturationCounter::default();
    let backbone = net
        .backbone
        .iter()
        .map(|layer| match layer {
            Layer::Conv(c) => Ok(FixedLayer::Conv(quantize_conv(c, fm, param, &mut sat)?)),
            Layer::Residual(r) => Ok(FixedLayer::Residual(
                quantize_conv(&r.conv_a, fm, param, &mut sat)?,
                quantize_conv(&r.conv_b, fm, param, &mut sat)?,
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let head = |h: &[AdderDense], sat: &mut SaturationCounter| {
        h.iter()
            .map(|d| quantize_dense(d, fm, param, sat))
            .collect::<Result<Vec<_>>>()
    };
    let head_a = head(&net.head_a, &mut sat)?;
    let head_i = head(&net.head_i, &mut sat)?;
    if sat.fraction() > max_clip_fraction {
        return Err(Error::Quantize(format!(
            "{} of {} parameters ({:.2}%) clip in {param}; limit is {:.2}%",
            sat.clipped,
            sat.total,
            100.0 * sat.fraction(),
            100.0 * max_clip_fraction
        )));
    }
    Ok(QuantizedNetwork {
        variant: net.variant,
        fm_format: fm,
        param_format: param,
        backbone,
        head_a,
        head_i,
        gate: net.gate,
        param_saturation: sat,
    })
}

/// Quantize with the default Q16.16 feature maps and Q10.10 parameters.
pub fn quantize_network_default(net: &Network) -> Result<QuantizedNetwork> {
    quantize_network(net, Q16_16, Q10_10)
}

impl FixedConv {
    /// Quantize a single float convolution into its fixed twin. The
    /// parameter format must not have more fractional bits than the
    /// feature-map format (weights are aligned by a pure left shift).
    pub fn from_float(
        c: &AdderConv,
        fm: QFormat,
        param: QFormat,
        sat: &mut SaturationCounter,
    ) -> Result<FixedConv> {
        fm.validate()?;
        param.validate()?;
        if param.frac_bits > fm.frac_bits {
            return Err(Error::Quantize(format!(
                "parameter format {param} has more fractional bits than feature-map format {fm}"
            )));
        }
        quantize_conv(c, fm, param, sat)
    }

    fn out_len(&self, in_len: usize) -> Result<usize> {
        if in_len < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "input length {in_len} shorter than kernel {}",
                self.kernel
            )));
        }
        Ok((in_len - self.kernel) / self.stride + 1)
    }

    /// Negated L1 window scores in i64 at feature-map scale, pinned
    /// accumulation order (kernel taps innermost, then channels).
    fn wide_sums(&self, x: &FixedMap) -> Result<Vec<i64>> {
        if x.channels != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} channels, got {}",
                self.in_ch, x.channels
            )));
        }
        let out_len = self.out_len(x.len)?;
        let mut out = vec![0i64; self.out_ch * out_len];
        for co in 0..self.out_ch {
            for wo in 0..out_len {
                let base = wo * self.stride;
                let mut acc: i64 = 0;
                for ci in 0..self.in_ch {
                    let xs = &x.data[ci * x.len + base..ci * x.len + base + self.kernel];
                    let ws = &self.weights_aligned[(co * self.in_ch + ci) * self.kernel..]
                        [..self.kernel];
                    for k in 0..self.kernel {
                        acc += (xs[k] - ws[k]).abs();
                    }
                }
                out[co * out_len + wo] = -acc;
            }
        }
        Ok(out)
    }

    /// Affine map on the wide sums: i128 product, shift gain re-scaled
    /// to feature-map frac, one rounding shift back down. No
    /// saturation here; callers narrow exactly once per element.
    fn affine_wide(&self, sums: &[i64], out_len: usize, param_frac: u32, fm_frac: u32) -> Vec<i128> {
        let mut out = Vec::with_capacity(sums.len());
        for co in 0..self.out_ch {
            let scale = self.scale_raw[co] as i128;
            let shift = (self.shift_raw[co] as i128) << fm_frac;
            for wo in 0..out_len {
                let acc = sums[co * out_len + wo] as i128;
                out.push(rounding_shift(acc * scale + shift, param_frac));
            }
        }
        out
    }

    /// Full layer: scores, affine, optional ReLU, one saturating
    /// narrowing per element.
    pub fn forward(&self, x: &FixedMap, fm: QFormat, param: QFormat, sat: &mut SaturationCounter) -> Result<FixedMap> {
        let out_len = self.out_len(x.len)?;
        let sums = self.wide_sums(x)?;
        let wide = self.affine_wide(&sums, out_len, param.frac_bits, fm.frac_bits);
        let mut out = FixedMap::zeros(self.out_ch, out_len);
        for (slot, mut v) in out.data.iter_mut().zip(wide) {
            if self.relu && v < 0 {
                v = 0;
            }
            *slot = fm.saturate(v, sat);
        }
        Ok(out)
    }
}

impl FixedDense {
    fn wide_sums(&self, x: &[i64]) -> Result<Vec<i64>> {
        if x.len() != self.in_features {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {} features, got {}",
                self.in_features,
                x.len()
            )));
        }
        Ok((0..self.out_features)
            .map(|o| {
                let ws = &self.weights_aligned[o * self.in_features..(o + 1) * self.in_features];
                let mut acc: i64 = 0;
                for (xi, wi) in x.iter().zip(ws) {
                    acc += (xi - wi).abs();
                }
                -acc
            })
            .collect())
    }

    fn forward(&self, x: &[i64], fm: QFormat, param: QFormat, sat: &mut SaturationCounter) -> Result<Vec<i64>> {
        let sums = self.wide_sums(x)?;
        Ok(sums
            .iter()
            .enumerate()
            .map(|(o, &s)| {
                let scale = self.scale_raw[o] as i128;
                let shift = (self.shift_raw[o] as i128) << fm.frac_bits;
                let mut v = rounding_shift(s as i128 * scale + shift, param.frac_bits);
                if self.relu && v < 0 {
                    v = 0;
                }
                fm.saturate(v, sat)
            })
            .collect())
    }
}

impl QuantizedNetwork {
    pub fn input_len(&self) -> usize {
        self.variant.input_len()
    }

    pub fn param_count(&self) -> usize {
        let conv = |c: &FixedConv| c.weights_raw.len() + c.scale_raw.len() + c.shift_raw.len();
        let dense = |d: &FixedDense| d.weights_raw.len() + d.scale_raw.len() + d.shift_raw.len();
        self.backbone
            .iter()
            .map(|l| match l {
                FixedLayer::Conv(c) => conv(c),
                FixedLayer::Residual(a, b) => conv(a) + conv(b),
            })
            .sum::<usize>()
            + self.head_a.iter().map(dense).sum::<usize>()
            + self.head_i.iter().map(dense).sum::<usize>()
    }

    fn residual_forward(
        a: &FixedConv,
        b: &FixedConv,
        x: &FixedMap,
        fm: QFormat,
        param: QFormat,
        sat: &mut SaturationCounter,
    ) -> Result<FixedMap> {
        let mid = a.forward(x, fm, param, sat)?;
        let out_len = b.out_len(mid.len)?;
        let sums = b.wide_sums(&mid)?;
        let wide = b.affine_wide(&sums, out_len, param.frac_bits, fm.frac_bits);
        let crop = (a.kernel - 1 + b.kernel - 1) / 2;
        let mut out = FixedMap::zeros(b.out_ch, out_len);
        for c in 0..out.channels {
            for t in 0..out_len {
                // Skip addition happens wide; the single narrowing
                // comes after the sum and the ReLU.
                let v = wide[c * out_len + t] + x.at(c, t + crop) as i128;
                let v = if v < 0 { 0 } else { v };
                out.data[c * out.len + t] = fm.saturate(v, sat);
            }
        }
        Ok(out)
    }

    /// Integer forward pass over a normalized input curve. Returns the
    /// decoded outputs and the feature-map saturation counter for the
    /// run (input encoding included).
    pub fn forward(&self, input: &[f64]) -> Result<([f64; 2], SaturationCounter)> {
        let fm = self.fm_format;
        let param = self.param_format;
        let mut sat = SaturationCounter::default();
        let mut map = FixedMap {
            channels: 1,
            len: input.len(),
            data: input
                .iter()
                .map(|&v| {
                    if !v.is_finite() {
                        return Err(Error::Numeric("non-finite network input".into()));
                    }
                    Ok(fm.encode_tracked(v, &mut sat))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        for layer in &self.backbone {
            map = match layer {
                FixedLayer::Conv(c) => c.forward(&map, fm, param, &mut sat)?,
                FixedLayer::Residual(a, b) => {
                    Self::residual_forward(a, b, &map, fm, param, &mut sat)?
                }
            };
        }
        let run_head = |head: &[FixedDense], sat: &mut SaturationCounter| -> Result<i64> {
            let mut cur = map.data.clone();
            for d in head {
                cur = d.forward(&cur, fm, param, sat)?;
            }
            if cur.len() != 1 {
                return Err(Error::InvalidConfig(
                    "head stack did not reduce to one output".into(),
                ));
            }
            Ok(cur[0])
        };
        let ta = run_head(&self.head_a, &mut sat)?;
        let ti = run_head(&self.head_i, &mut sat)?;
        Ok(([fm.decode(ta), fm.decode(ti)], sat))
    }

    /// Gate, normalize, and run the integer pipeline; background pixels
    /// return (0, 0) without arithmetic.
    pub fn predict(&self, counts: &[u32]) -> Result<(LifetimePair, SaturationCounter)> {
        if counts.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} input bins, got {}",
                self.variant.name(),
                self.input_len(),
                counts.len()
            )));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if !threshold_gate(total, self.gate) {
            return Ok((LifetimePair::ZERO, SaturationCounter::default()));
        }
        let (out, sat) = self.forward(&super::normalize_input(counts))?;
        Ok((
            LifetimePair {
                tau_a: out[0],
                tau_i: out[1],
            },
            sat,
        ))
    }

    /// Raw parameters in serialization order (same walk as the float
    /// network), values in the parameter format.
    pub fn params_to_raw(&self) -> Vec<i64> {
        let mut out = Vec::with_capacity(self.param_count());
        let conv = |c: &FixedConv, out: &mut Vec<i64>| {
            out.extend_from_slice(&c.weights_raw);
            out.extend_from_slice(&c.scale_raw);
            out.extend_from_slice(&c.shift_raw);
        };
        for layer in &self.backbone {
            match layer {
                FixedLayer::Conv(c) => conv(c, &mut out),
                FixedLayer::Residual(a, b) => {
                    conv(a, &mut out);
                    conv(b, &mut out);
                }
            }
        }
        for head in [&self.head_a, &self.head_i] {
            for d in head.iter() {
                out.extend_from_slice(&d.weights_raw);
                out.extend_from_slice(&d.scale_raw);
                out.extend_from_slice(&d.shift_raw);
            }
        }
        out
    }

    /// Overwrite raw parameters from serialization order, re-aligning
    /// weights; every value must fit the parameter format.
    pub fn set_params_from_raw(&mut self, raw: &[i64]) -> Result<()> {
        if raw.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "raw parameter vector has {} entries, network needs {}",
                raw.len(),
                self.param_count()
            )));
        }
        let param = self.param_format;
        let (lo, hi) = (param.raw_min(), param.raw_max());
        if raw.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::Quantize(format!(
                "raw parameter outside {param} range [{lo}, {hi}]"
            )));
        }
        let shift_bits = self.fm_format.frac_bits - param.frac_bits;
        let mut pos = 0usize;
        let take = |dst_raw: &mut Vec<i64>, dst_aligned: &mut Vec<i64>, pos: &mut usize| {
            let n = dst_raw.len();
            dst_raw.copy_from_slice(&raw[*pos..*pos + n]);
            *dst_aligned = align_weights(dst_raw, shift_bits);
            *pos += n;
        };
        let take_plain = |dst: &mut Vec<i64>, pos: &mut usize| {
            let n = dst.len();
            dst.copy_from_slice(&raw[*pos..*pos + n]);
            *pos += n;
        };
        let do_conv = |c: &mut FixedConv, pos: &mut usize| {
            take(&mut c.weights_raw, &mut c.weights_aligned, pos);
            take_plain(&mut c.scale_raw, pos);
            take_plain(&mut c.shift_raw, pos);
        };
        for layer in &mut self.backbone {
            match layer {
                FixedLayer::Conv(c) => do_conv(c, &mut pos),
                FixedLayer::Residual(a, b) => {
                    do_conv(a, &mut pos);
                    do_conv(b, &mut pos);
                }
            }
        }
        for head in [&mut self.head_a, &mut self.head_i] {
            for d in head.iter_mut() {
                take(&mut d.weights_raw, &mut d.weights_aligned, &mut pos);
                take_plain(&mut d.scale_raw, &mut pos);
                take_plain(&mut d.shift_raw, &mut pos);
            }
        }
        debug_assert_eq!(pos, raw.len());
        Ok(())
    }
}
