//! Multiplication-free 1-D adder network for lifetime regression.
//!
//! Convolution and dense layers score input windows by negated L1
//! distance to their weight vectors instead of dot products:
//! `s = -sum |x - w|`. Each layer follows with a per-channel affine map
//! (the folded form of batch normalization, `y = scale * s + shift`)
//! and, where enabled, a ReLU. Downsampling comes from stride, never
//! padding, so every layer shortens the record deterministically.
//!
//! A model is a backbone (strided adder convolutions around exactly one
//! residual block) followed by two parallel dense head stacks, one per
//! regressed lifetime. A photon-count threshold gate runs before any
//! arithmetic: pixels at or below the gate return (0, 0) untouched.
//!
//! The float path here is the reference semantics; the integer path in
//! [`fixed`] mirrors it operation for operation. Accumulation order is
//! pinned (kernel taps innermost, then input channels) so independent
//! implementations can match it bit for bit.

pub mod backward;
pub mod bn;
pub mod fixed;

use crate::error::{Error, Result};
use crate::histogram::LifetimePair;

/// Network architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full-resolution model over 256-bin histograms.
    Flan,
    /// Compact model over 80 log-scale merged bins.
    FlanLs,
}

impl Variant {
    pub fn input_len(self) -> usize {
        match self {
            Variant::Flan => 256,
            Variant::FlanLs => 80,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Flan => "flan",
            Variant::FlanLs => "flan-ls",
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Variant::Flan => 0,
            Variant::FlanLs => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Variant::Flan),
            1 => Ok(Variant::FlanLs),
            other => Err(Error::Format(format!("unknown network variant tag {other}"))),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flan" => Ok(Variant::Flan),
            "flan-ls" => Ok(Variant::FlanLs),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant '{other}' (expected flan|flan-ls)"
            ))),
        }
    }
}

/// Channel-major 1-D feature map: `data[c * len + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, len: usize) -> Self {
        FeatureMap {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_vec(channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * len {
            return Err(Error::ShapeMismatch(format!(
                "feature map of {channels}x{len} needs {} values, got {}",
                channels * len,
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            len,
            data,
        })
    }

    /// A flat vector viewed as one channel-1 map (dense-stack plumbing).
    pub fn from_flat(data: Vec<f64>) -> Self {
        FeatureMap {
            channels: 1,
            len: data.len(),
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.len + t]
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }
}

/// Strided 1-D adder convolution with folded per-channel affine and
/// optional ReLU. Weights are stored `[out_ch][in_ch][kernel]`, kernel
/// tap fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AdderConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub relu: bool,
}

impl AdderConv {
    /// Fresh layer with zero weights and an identity affine.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        AdderConv {
            in_ch,
            out_ch,
            kernel,
            stride,
            weights: vec![0.0; out_ch * in_ch * kernel],
            scale: vec![1.0; out_ch],
            shift: vec![0.0; out_ch],
            relu,
        }
    }

    #[inline]
    pub fn w(&self, co: usize, ci: usize, k: usize) -> f64 {
        self.weights[(co * self.in_ch + ci) * self.kernel + k]
    }

    pub fn out_len(&self, in_len: usize) -> Result<usize> {
        if in_len < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "input length {in_len} shorter than kernel {}",
                self.kernel
            )));
        }
        Ok((in_len - self.kernel) / self.stride + 1)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + 2 * self.out_ch
    }

    /// Negated-L1 window scores before the affine map; every entry is
    /// <= 0. Kernel taps accumulate innermost, then input channels.
    pub fn raw_sums(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} channels, got {}",
                self.in_ch, x.channels
            )));
        }
        let out_len = self.out_len(x.len)?;
        let mut out = FeatureMap::zeros(self.out_ch, out_len);
        for co in 0..self.out_ch {
            let orow = &mut out.data[co * out_len..(co + 1) * out_len];
            for (wo, slot) in orow.iter_mut().enumerate() {
                let base = wo * self.stride;
                let mut acc = 0.0;
                for ci in 0..self.in_ch {
                    let xs = &x.data[ci * x.len + base..ci * x.len + base + self.kernel];
                    let ws =
                        &self.weights[(co * self.in_ch + ci) * self.kernel..][..self.kernel];
                    for k in 0..self.kernel {
                        acc += (xs[k] - ws[k]).abs();
                    }
                }
                *slot = -acc;
            }
        }
        Ok(out)
    }

    fn affine_relu_inplace(&self, s: &mut FeatureMap) {
        for co in 0..self.out_ch {
            let (sc, sh) = (self.scale[co], self.shift[co]);
            for v in &mut s.data[co * s.len..(co + 1) * s.len] {
                let z = sc * *v + sh;
                *v = if self.relu { z.max(0.0) } else { z };
            }
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut s = self.raw_sums(x)?;
        self.affine_relu_inplace(&mut s);
        Ok(s)
    }

    /// Forward pass that keeps the intermediates needed for gradients.
    pub fn forward_cached(&self, x: &FeatureMap) -> Result<ConvCache> {
        let pre_affine = self.raw_sums(x)?;
        let mut pre_relu = pre_affine.clone();
        for co in 0..self.out_ch {
            let (sc, sh) = (self.scale[co], self.shift[co]);
            for v in &mut pre_relu.data[co * pre_relu.len..(co + 1) * pre_relu.len] {
                *v = sc * *v + sh;
            }
        }
        let mut out = pre_relu.clone();
        if self.relu {
            for v in &mut out.data {
                *v = v.max(0.0);
            }
        }
        Ok(ConvCache {
            input: x.clone(),
            pre_affine,
            pre_relu,
            out,
        })
    }
}

/// Two stride-1 adder convolutions with an identity skip. The
/// convolutions shorten the record (no padding), so the skip is
/// center-cropped to align; the block ends in a ReLU over the sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv_a: AdderConv,
    pub conv_b: AdderConv,
}

impl ResidualBlock {
    pub fn new(channels: usize, kernel: usize) -> Self {
        let conv_a = AdderConv::new(channels, channels, kernel, 1, true);
        let conv_b = AdderConv::new(channels, channels, kernel, 1, false);
        ResidualBlock { conv_a, conv_b }
    }

    /// Bins trimmed from each end of the skip path.
    pub fn crop(&self) -> usize {
        (self.conv_a.kernel - 1 + self.conv_b.kernel - 1) / 2
    }

    pub fn out_len(&self, in_len: usize) -> Result<usize> {
        self.conv_b.out_len(self.conv_a.out_len(in_len)?)
    }

    pub fn param_count(&self) -> usize {
        self.conv_a.param_count() + self.conv_b.param_count()
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let a = self.conv_a.forward(x)?;
        let mut z = self.conv_b.forward(&a)?;
        let crop = self.crop();
        for c in 0..z.channels {
            for t in 0..z.len {
                let v = z.data[c * z.len + t] + x.at(c, t + crop);
                z.data[c * z.len + t] = v.max(0.0);
            }
        }
        Ok(z)
    }

    pub fn forward_cached(&self, x: &FeatureMap) -> Result<ResidualCache> {
        let a = self.conv_a.forward_cached(x)?;
        let b = self.conv_b.forward_cached(&a.out)?;
        let crop = self.crop();
        let mut pre_relu_sum = b.out.clone();
        for c in 0..pre_relu_sum.channels {
            for t in 0..pre_relu_sum.len {
                pre_relu_sum.data[c * pre_relu_sum.len + t] += x.at(c, t + crop);
            }
        }
        let mut out = pre_relu_sum.clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        Ok(ResidualCache {
            a,
            b,
            pre_relu_sum,
            out,
        })
    }
}

/// Adder-style fully connected layer: negated L1 distance from the
/// flattened input to each output's weight vector, then a per-output
/// affine and an optional ReLU. Weights are `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdderDense {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub relu: bool,
}

impl AdderDense {
    pub fn new(in_features: usize, out_features: usize, relu: bool) -> Self {
        AdderDense {
            in_features,
            out_features,
            weights: vec![0.0; out_features * in_features],
            scale: vec![1.0; out_features],
            shift: vec![0.0; out_features],
            relu,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + 2 * self.out_features
    }

    /// Scores before the affine map, one per output.
    pub fn raw_sums(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_features {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {} features, got {}",
                self.in_features,
                x.len()
            )));
        }
        Ok((0..self.out_features)
            .map(|o| {
                let ws = &self.weights[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = 0.0;
                for (xi, wi) in x.iter().zip(ws) {
                    acc += (xi - wi).abs();
                }
                -acc
            })
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.raw_sums(x)?;
        Ok(s.iter()
            .enumerate()
            .map(|(o, &v)| {
                let z = self.scale[o] * v + self.shift[o];
                if self.relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect())
    }
}

/// Backbone layer kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(AdderConv),
    Residual(ResidualBlock),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.param_count(),
            Layer::Residual(r) => r.param_count(),
        }
    }
}

/// Intermediates kept by a cached convolution pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: FeatureMap,
    pub pre_affine: FeatureMap,
    pub pre_relu: FeatureMap,
    pub out: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    pub a: ConvCache,
    pub b: ConvCache,
    pub pre_relu_sum: FeatureMap,
    pub out: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub pre_affine: Vec<f64>,
    pub pre_relu: Vec<f64>,
    pub out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum BackboneCache {
    Conv(ConvCache),
    Residual(ResidualCache),
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub backbone: Vec<BackboneCache>,
    pub head_a: Vec<DenseCache>,
    pub head_i: Vec<DenseCache>,
    pub output: [f64; 2],
}

/// A complete lifetime-regression network: backbone plus two branched
/// dense head stacks (amplitude- and intensity-averaged lifetime), and
/// a photon-count gate applied before any arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub variant: Variant,
    pub backbone: Vec<Layer>,
    pub head_a: Vec<AdderDense>,
    pub head_i: Vec<AdderDense>,
    /// Total-photon threshold: a histogram passes only if its sum is
    /// strictly greater.
    pub gate: u64,
}

/// Strict-inequality photon gate: `true` means the pixel is foreground
/// and the network runs.
pub fn threshold_gate(total_photons: u64, t_gate: u64) -> bool {
    total_photons > t_gate
}

impl Network {
    pub fn input_len(&self) -> usize {
        self.variant.input_len()
    }

    pub fn param_count(&self) -> usize {
        self.backbone.iter().map(Layer::param_count).sum::<usize>()
            + self.head_a.iter().map(AdderDense::param_count).sum::<usize>()
            + self.head_i.iter().map(AdderDense::param_count).sum::<usize>()
    }

    /// Structural sanity: shapes chain, one residual block, heads end in
    /// one output each.
    pub fn validate(&self) -> Result<()> {
        let residuals = self
            .backbone
            .iter()
            .filter(|l| matches!(l, Layer::Residual(_)))
            .count();
        if residuals != 1 {
            return Err(Error::InvalidConfig(format!(
                "backbone must contain exactly one residual block, found {residuals}"
            )));
        }
        let mut len = self.input_len();
        let mut ch = 1usize;
        for layer in &self.backbone {
            match layer {
                Layer::Conv(c) => {
                    if c.in_ch != ch {
                        return Err(Error::InvalidConfig("channel chain broken".into()));
                    }
                    len = c.out_len(len)?;
                    ch = c.out_ch;
                }
                Layer::Residual(r) => {
                    if r.conv_a.in_ch != ch || r.conv_a.out_ch != ch || r.conv_b.out_ch != ch {
                        return Err(Error::InvalidConfig(
                            "residual block must preserve channels".into(),
                        ));
                    }
                    len = r.out_len(len)?;
                }
            }
        }
        let flat = ch * len;
        for head in [&self.head_a, &self.head_i] {
            let mut features = flat;
            if head.is_empty() {
                return Err(Error::InvalidConfig("empty head stack".into()));
            }
            for d in head.iter() {
                if d.in_features != features {
                    return Err(Error::InvalidConfig("head feature chain broken".into()));
                }
                features = d.out_features;
            }
            if features != 1 {
                return Err(Error::InvalidConfig(
                    "each head must end in exactly one output".into(),
                ));
            }
        }
        Ok(())
    }

    fn run_backbone(&self, input: &[f64]) -> Result<FeatureMap> {
        let mut map = FeatureMap::from_vec(1, input.len(), input.to_vec())?;
        for layer in &self.backbone {
            map = match layer {
                Layer::Conv(c) => c.forward(&map)?,
                Layer::Residual(r) => r.forward(&map)?,
            };
        }
        Ok(map)
    }

    fn run_head(head: &[AdderDense], flat: &[f64]) -> Result<f64> {
        let mut cur = flat.to_vec();
        for d in head {
            cur = d.forward(&cur)?;
        }
        if cur.len() != 1 {
            return Err(Error::InvalidConfig(
                "head stack did not reduce to one output".into(),
            ));
        }
        Ok(cur[0])
    }

    /// Network output for a normalized input curve (gate not applied).
    ///
    /// The input may be any length the layer chain accepts; a length the
    /// chain cannot digest surfaces as a shape error from the first layer
    /// that rejects it. The variant's nominal bin count is enforced only
    /// by [`Network::predict`] and [`Network::validate`].
    pub fn forward(&self, input: &[f64]) -> Result<[f64; 2]> {
        let map = self.run_backbone(input)?;
        let tau_a = Self::run_head(&self.head_a, &map.data)?;
        let tau_i = Self::run_head(&self.head_i, &map.data)?;
        Ok([tau_a, tau_i])
    }

    /// Gate, normalize, and run: background pixels (total photons at or
    /// below the gate) return (0, 0) without touching the network.
    pub fn predict(&self, counts: &[u32]) -> Result<LifetimePair> {
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
            return Ok(LifetimePair::ZERO);
        }
        let out = self.forward(&normalize_input(counts))?;
        Ok(LifetimePair {
            tau_a: out[0],
            tau_i: out[1],
        })
    }

    /// Forward pass that retains every intermediate needed for
    /// gradients.
    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        let mut map = FeatureMap::from_vec(1, input.len(), input.to_vec())?;
        let mut backbone = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            match layer {
                Layer::Conv(c) => {
                    let cache = c.forward_cached(&map)?;
                    map = cache.out.clone();
                    backbone.push(BackboneCache::Conv(cache));
                }
                Layer::Residual(r) => {
                    let cache = r.forward_cached(&map)?;
                    map = cache.out.clone();
                    backbone.push(BackboneCache::Residual(cache));
                }
            }
        }
        let run_head_cached = |head: &[AdderDense]| -> Result<(Vec<DenseCache>, f64)> {
            let mut cur = map.data.clone();
            let mut caches = Vec::with_capacity(head.len());
            for d in head {
                let pre = d.raw_sums(&cur)?;
                let pre_relu: Vec<f64> = pre
                    .iter()
                    .enumerate()
                    .map(|(o, &v)| d.scale[o] * v + d.shift[o])
                    .collect();
                let out: Vec<f64> = if d.relu {
                    pre_relu.iter().map(|&z| z.max(0.0)).collect()
                } else {
                    pre_relu.clone()
                };
                caches.push(DenseCache {
                    input: cur,
                    pre_affine: pre,
                    pre_relu,
                    out: out.clone(),
                });
                cur = out;
            }
            if cur.len() != 1 {
                return Err(Error::InvalidConfig(
                    "head stack did not reduce to one output".into(),
                ));
            }
            Ok((caches, cur[0]))
        };
        let (head_a, tau_a) = run_head_cached(&self.head_a)?;
        let (head_i, tau_i) = run_head_cached(&self.head_i)?;
        Ok(ForwardCache {
            backbone,
            head_a,
            head_i,
            output: [tau_a, tau_i],
        })
    }

    /// All parameters in serialization order: backbone layers front to
    /// back, then the amplitude head, then the intensity head; each
    /// tensor as weights, then scale, then shift (residual blocks emit
    /// their first convolution before their second).
    pub fn params_to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        let push_conv = |c: &AdderConv, flat: &mut Vec<f64>| {
            flat.extend_from_slice(&c.weights);
            flat.extend_from_slice(&c.scale);
            flat.extend_from_slice(&c.shift);
        };
        for layer in &self.backbone {
            match layer {
                Layer::Conv(c) => push_conv(c, &mut flat),
                Layer::Residual(r) => {
                    push_conv(&r.conv_a, &mut flat);
                    push_conv(&r.conv_b, &mut flat);
                }
            }
        }
        for head in [&self.head_a, &self.head_i] {
            for d in head.iter() {
                flat.extend_from_slice(&d.weights);
                flat.extend_from_slice(&d.scale);
                flat.extend_from_slice(&d.shift);
            }
        }
        flat
    }

    /// Overwrite all parameters from a flat vector in serialization
    /// order.
    pub fn set_params_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} entries, network needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0usize;
        fn take(flat: &[f64], dst: &mut [f64], pos: &mut usize) {
            dst.copy_from_slice(&flat[*pos..*pos + dst.len()]);
            *pos += dst.len();
        }
        fn take_conv(flat: &[f64], c: &mut AdderConv, pos: &mut usize) {
            take(flat, &mut c.weights, pos);
            take(flat, &mut c.scale, pos);
            take(flat, &mut c.shift, pos);
        }
        for layer in &mut self.backbone {
            match layer {
                Layer::Conv(c) => take_conv(flat, c, &mut pos),
                Layer::Residual(r) => {
                    take_conv(flat, &mut r.conv_a, &mut pos);
                    take_conv(flat, &mut r.conv_b, &mut pos);
                }
            }
        }
        for head in [&mut self.head_a, &mut self.head_i] {
            for d in head.iter_mut() {
                take(flat, &mut d.weights, &mut pos);
                take(flat, &mut d.scale, &mut pos);
                take(flat, &mut d.shift, &mut pos);
            }
        }
        debug_assert_eq!(pos, flat.len());
        Ok(())
    }
}

/// Reference architecture for a variant, parameters at their blank
/// defaults (zero weights, identity affine, gate 0).
///
/// Backbone: stem K7 stride-2 conv, K5 stride-2 conv, one residual
/// block of two K3 convs, then (full model only) two more K3 stride-2
/// convs. Heads: hidden adder-dense with ReLU, then a 1-output
/// adder-dense with affine output. The compact variant halves the
/// channel widths and drops the two late strided stages.
pub fn build_flan(variant: Variant) -> Network {
    let (backbone, flat, hidden) = match variant {
        // 256 -> 125 -> 61 -> 57 -> 28 -> 13; flat = 24 * 13 = 312.
        Variant::Flan => (
            vec![
                Layer::Conv(AdderConv::new(1, 16, 7, 2, true)),
                Layer::Conv(AdderConv::new(16, 16, 5, 2, true)),
                Layer::Residual(ResidualBlock::new(16, 3)),
                Layer::Conv(AdderConv::new(16, 24, 3, 2, true)),
                Layer::Conv(AdderConv::new(24, 24, 3, 2, true)),
            ],
            24 * 13,
            32,
        ),
        // 80 -> 37 -> 17 -> 13; flat = 8 * 13 = 104.
        Variant::FlanLs => (
            vec![
                Layer::Conv(AdderConv::new(1, 8, 7, 2, true)),
                Layer::Conv(AdderConv::new(8, 8, 5, 2, true)),
                Layer::Residual(ResidualBlock::new(8, 3)),
            ],
            8 * 13,
            16,
        ),
    };
    let head = |flat: usize, hidden: usize| {
        vec![
            AdderDense::new(flat, hidden, true),
            AdderDense::new(hidden, 1, false),
        ]
    };
    let net = Network {
        variant,
        backbone,
        head_a: head(flat, hidden),
        head_i: head(flat, hidden),
        gate: 0,
    };
    debug_assert!(net.validate().is_ok());
    net
}

/// Scale a raw photon histogram to unit peak for network input. An
/// all-zero histogram stays all zero.
pub fn normalize_input(counts: &[u32]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0.0; counts.len()];
    }
    let inv = 1.0 / max as f64;
    counts.iter().map(|&c| c as f64 * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conv_hand_computed_single_channel() {
        let mut c = AdderConv::new(1, 1, 2, 1, true);
        c.weights = vec![0.5, -0.5];
        c.scale = vec![-1.0];
        c.shift = vec![-2.0];
        let x = FeatureMap::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        // Window sums: |1-0.5|+|2+0.5| = 3, |2-0.5|+|3+0.5| = 5.
        let s = c.raw_sums(&x).unwrap();
        assert_eq!(s.data, vec![-3.0, -5.0]);
        // Affine: -1 * (-3) - 2 = 1; -1 * (-5) - 2 = 3.
        let y = c.forward(&x).unwrap();
        assert_eq!(y.data, vec![1.0, 3.0]);
    }

    #[test]
    fn conv_matches_published_worked_example() {
        // Input [1,2,3], kernel [1,1], stride 1, identity affine, no
        // ReLU: outputs -(|1-1|+|2-1|) = -1 and -(|2-1|+|3-1|) = -3.
        let mut c = AdderConv::new(1, 1, 2, 1, false);
        c.weights = vec![1.0, 1.0];
        let x = FeatureMap::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = c.forward(&x).unwrap();
        assert_eq!(y.data, vec![-1.0, -3.0]);
    }

    #[test]
    fn exact_weight_match_scores_zero() {
        let mut c = AdderConv::new(1, 1, 3, 1, false);
        c.weights = vec![0.2, 0.7, 0.4];
        let x = FeatureMap::from_vec(1, 5, vec![0.9, 0.2, 0.7, 0.4, 0.1]).unwrap();
        let s = c.raw_sums(&x).unwrap();
        assert_eq!(s.data[1], 0.0);
        let max = s.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, 0.0);
    }

    #[test]
    fn conv_stride_picks_correct_windows() {
        let mut c = AdderConv::new(1, 1, 3, 2, false);
        c.weights = vec![0.0; 3];
        let x =
            FeatureMap::from_vec(1, 7, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0]).unwrap();
        let y = c.forward(&x).unwrap();
        // Windows start at 0, 2, 4: sums 3, 5, 7.
        assert_eq!(y.data, vec![-3.0, -5.0, -7.0]);
    }

    #[test]
    fn conv_two_channel_accumulation() {
        let mut c = AdderConv::new(2, 1, 2, 1, false);
        // weights[ci=0] = [1, 0], weights[ci=1] = [0, 1]
        c.weights = vec![1.0, 0.0, 0.0, 1.0];
        let x = FeatureMap::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        // ci0: |3-1| + |4-0| = 6; ci1: |5-0| + |6-1| = 10; total 16.
        let y = c.forward(&x).unwrap();
        assert_eq!(y.data, vec![-16.0]);
    }

    #[test]
    fn conv_matches_brute_force_oracle() {
        // Independent nested-loop evaluation of the defining formula,
        // same accumulation order, on a randomized non-square case.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let (ci_n, co_n, w_in, k, s) = (2usize, 3usize, 7usize, 3usize, 2usize);
        let mut c = AdderConv::new(ci_n, co_n, k, s, false);
        for w in &mut c.weights {
            *w = rng.gen_range(-2.0..2.0);
        }
        for v in &mut c.scale {
            *v = rng.gen_range(-1.5..1.5);
        }
        for v in &mut c.shift {
            *v = rng.gen_range(-1.0..1.0);
        }
        let data: Vec<f64> = (0..ci_n * w_in).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = FeatureMap::from_vec(ci_n, w_in, data).unwrap();
        let got = c.forward(&x).unwrap();

        let w_out = (w_in - k) / s + 1;
        for co in 0..co_n {
            for wo in 0..w_out {
                let mut acc = 0.0;
                for ci in 0..ci_n {
                    for kx in 0..k {
                        acc += (x.at(ci, wo * s + kx) - c.w(co, ci, kx)).abs();
                    }
                }
                let expect = c.scale[co] * (-acc) + c.shift[co];
                assert_eq!(got.at(co, wo), expect, "mismatch at ({co},{wo})");
            }
        }
    }

    #[test]
    fn conv_output_lengths() {
        let c = AdderConv::new(1, 1, 3, 2, true);
        assert_eq!(c.out_len(256).unwrap(), 127);
        assert_eq!(c.out_len(3).unwrap(), 1);
        assert!(c.out_len(2).is_err());
    }

    #[test]
    fn residual_with_silent_convs_passes_cropped_input() {
        // Zero weights and zero scale silence the convolution path, so
        // the block reduces to relu(skip): the input cropped by 2 bins
        // on each side.
        let mut r = ResidualBlock::new(1, 3);
        r.conv_a.scale = vec![0.0];
        r.conv_b.scale = vec![0.0];
        let x =
            FeatureMap::from_vec(1, 7, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0, 7.0]).unwrap();
        let y = r.forward(&x).unwrap();
        assert_eq!(y.len, 3);
        assert_eq!(y.data, vec![3.0, 0.0, 5.0]);
    }

    #[test]
    fn residual_identity_configuration_reproduces_input() {
        // Exact-match weights give zero pre-affine output; identity
        // affine on conv_b then leaves only the skip, so the block is
        // the identity on the cropped window (inputs are nonnegative
        // post-ReLU in practice).
        let mut r = ResidualBlock::new(1, 3);
        // conv_a: zero weights on a zero input region is not needed;
        // instead silence conv_a's output via scale 0 (its exact-match
        // configuration), and give conv_b weights equal to conv_a's
        // constant output 0 so its window score is 0 too.
        r.conv_a.scale = vec![0.0];
        r.conv_b.weights = vec![0.0; 3];
        r.conv_b.scale = vec![1.0];
        let x = FeatureMap::from_vec(1, 7, vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 0.25]).unwrap();
        let y = r.forward(&x).unwrap();
        assert_eq!(y.data, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn dense_hand_computed() {
        let mut d = AdderDense::new(3, 2, false);
        d.weights = vec![0.0, 1.0, 2.0, 1.0, 1.0, 1.0];
        d.scale = vec![1.0, -2.0];
        d.shift = vec![0.5, 0.0];
        // out0: -(1 + 0 + 1) = -2 -> 1*-2 + 0.5 = -1.5
        // out1: -(0 + 0 + 0) = 0 -> 0
        let y = d.forward(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(y, vec![-1.5, 0.0]);
    }

    #[test]
    fn dense_relu_clamps() {
        let mut d = AdderDense::new(2, 1, true);
        d.weights = vec![0.0, 0.0];
        let y = d.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn gate_uses_strict_inequality() {
        assert!(!threshold_gate(0, 0));
        assert!(threshold_gate(1, 0));
        assert!(!threshold_gate(100, 100));
        assert!(threshold_gate(101, 100));
    }

    #[test]
    fn gated_background_pixel_returns_zeros_for_any_weights() {
        let mut net = build_flan(Variant::FlanLs);
        net.gate = 50;
        let n = net.param_count();
        net.set_params_from_flat(&vec![f64::NAN; n]).unwrap();
        // Total 50 = gate: background; NaN weights prove the network
        // never ran.
        let counts = vec![1u32; 50];
        let mut padded = counts.clone();
        padded.resize(80, 0);
        let out = net.predict(&padded).unwrap();
        assert_eq!(out, LifetimePair::ZERO);
        // One more photon crosses the gate.
        padded[0] = 2;
        assert!(net.predict(&padded).unwrap().tau_a.is_nan());
    }

    #[test]
    fn golden_micro_model_trace() {
        // Hand-computed four-bin trace through conv -> affine -> ReLU
        // -> two single-dense heads.
        let mut conv = AdderConv::new(1, 1, 3, 1, true);
        conv.weights = vec![0.0, 0.5, 1.0];
        conv.scale = vec![-2.0];
        conv.shift = vec![1.0];
        let head = |w: Vec<f64>, scale: f64, shift: f64| {
            let mut d = AdderDense::new(2, 1, false);
            d.weights = w;
            d.scale = vec![scale];
            d.shift = vec![shift];
            vec![d]
        };
        let net = Network {
            variant: Variant::Flan,
            backbone: vec![Layer::Conv(conv)],
            head_a: head(vec![4.0, 4.0], 1.0, 0.25),
            head_i: head(vec![5.0, 5.0], -2.0, 0.0),
            gate: 0,
        };
        // Skip validate(): this micro-model deliberately has no
        // residual block and a 4-bin input.
        let input = [1.0, 0.5, 0.25, 0.125];
        let map = net.run_backbone(&input).unwrap();
        // Window 0: |1-0|+|0.5-0.5|+|0.25-1| = 1.75 -> -2*(-1.75)+1 = 4.5
        // Window 1: |0.5-0|+|0.25-0.5|+|0.125-1| = 1.625 -> 4.25
        assert_eq!(map.data, vec![4.5, 4.25]);
        let a = Network::run_head(&net.head_a, &map.data).unwrap();
        let i = Network::run_head(&net.head_i, &map.data).unwrap();
        // head_a: -(|4.5-4|+|4.25-4|) = -0.75 -> -0.75+0.25 = -0.5
        // head_i: -(0.5+0.75) = -1.25 -> -2*(-1.25) = 2.5
        assert_eq!([a, i], [-0.5, 2.5]);
    }

    #[test]
    fn reference_architectures_have_frozen_sizes() {
        let flan = build_flan(Variant::Flan);
        flan.validate().unwrap();
        assert_eq!(flan.param_count(), 26_196);
        assert!((19_553..=26_453).contains(&flan.param_count()));

        let ls = build_flan(Variant::FlanLs);
        ls.validate().unwrap();
        assert_eq!(ls.param_count(), 4_252);
        assert!((3_246..=4_870).contains(&ls.param_count()));

        // The compact variant has strictly fewer strided layers.
        let strided = |net: &Network| {
            net.backbone
                .iter()
                .filter(|l| matches!(l, Layer::Conv(c) if c.stride > 1))
                .count()
        };
        assert!(strided(&ls) < strided(&flan));
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        for variant in [Variant::Flan, Variant::FlanLs] {
            let net = build_flan(variant);
            let input: Vec<f64> = (0..variant.input_len())
                .map(|i| (-(i as f64) / 40.0).exp())
                .collect();
            let out = net.forward(&input).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
            // The gate-and-run entry point owns the bin-count contract.
            let counts = vec![1u32; variant.input_len() - 1];
            assert!(net.predict(&counts).is_err());
            // An input too short for the layer chain still fails, from
            // whichever layer first rejects it.
            assert!(net.forward(&input[..3]).is_err());
        }
    }

    #[test]
    fn flat_parameter_roundtrip_preserves_forward() {
        let mut net = build_flan(Variant::FlanLs);
        let n = net.param_count();
        let flat: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
        net.set_params_from_flat(&flat).unwrap();
        let back = net.params_to_flat();
        assert_eq!(back, flat);

        let input: Vec<f64> = (0..80).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let a = net.forward(&input).unwrap();
        let mut other = build_flan(Variant::FlanLs);
        other.set_params_from_flat(&back).unwrap();
        let b = other.forward(&input).unwrap();
        assert_eq!(a, b);

        assert!(net.set_params_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn validate_rejects_malformed_models() {
        let mut net = build_flan(Variant::FlanLs);
        net.head_a.clear();
        assert!(net.validate().is_err());

        let mut net = build_flan(Variant::FlanLs);
        net.backbone.push(Layer::Residual(ResidualBlock::new(8, 3)));
        assert!(net.validate().is_err());

        let mut net = build_flan(Variant::FlanLs);
        if let Some(d) = net.head_i.last_mut() {
            *d = AdderDense::new(16, 2, false);
        }
        assert!(net.validate().is_err());
    }

    #[test]
    fn normalize_input_scales_to_unit_peak() {
        assert_eq!(normalize_input(&[2, 8, 4]), vec![0.25, 1.0, 0.5]);
        assert_eq!(normalize_input(&[0, 0]), vec![0.0, 0.0]);
        let empty: Vec<f64> = vec![];
        assert_eq!(normalize_input(&[]), empty);
    }

    #[test]
    fn variant_tags_roundtrip() {
        for v in [Variant::Flan, Variant::FlanLs] {
            assert_eq!(Variant::from_u8(v.as_u8()).unwrap(), v);
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(Variant::from_u8(7).is_err());
        assert!("vgg".parse::<Variant>().is_err());
    }

    proptest! {
        #[test]
        fn window_scores_are_never_positive(
            xs in proptest::collection::vec(-5.0f64..5.0, 8),
            ws in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let mut c = AdderConv::new(2, 1, 3, 1, true);
            c.weights = ws;
            let x = FeatureMap::from_vec(2, 4, xs).unwrap();
            let s = c.raw_sums(&x).unwrap();
            prop_assert!(s.data.iter().all(|&v| v <= 0.0));
        }

        #[test]
        fn interior_feature_maps_are_nonnegative(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut net = build_flan(Variant::FlanLs);
            let n = net.param_count();
            let flat: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            net.set_params_from_flat(&flat).unwrap();
            let input: Vec<f64> = (0..80).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cache = net.forward_cached(&input).unwrap();
            for layer in &cache.backbone {
                match layer {
                    BackboneCache::Conv(c) => {
                        prop_assert!(c.out.data.iter().all(|&v| v >= 0.0));
                    }
                    BackboneCache::Residual(r) => {
                        prop_assert!(r.out.data.iter().all(|&v| v >= 0.0));
                    }
                }
            }
            for (head, layers) in [(&cache.head_a, &net.head_a), (&cache.head_i, &net.head_i)] {
                for (d, layer) in head.iter().zip(layers) {
                    if layer.relu {
                        prop_assert!(d.out.iter().all(|&v| v >= 0.0));
                    }
                }
            }
        }
    }
}
