//! Gradients for the adder network.
//!
//! The L1 window score `s = -sum |x - w|` has sign gradients, which
//! train poorly, so the backward pass uses the standard surrogates for
//! adder layers: full-precision `(x - w)` toward the weights and the
//! clipped `clamp(w - x, -1, 1)` toward the input. Affine maps, ReLU,
//! and the loss differentiate exactly (ReLU passes zero gradient at
//! zero). Per-tensor adaptive scaling normalizes each weight-gradient
//! tensor to L2 norm `sqrt(k)` (k = tensor element count) before the
//! optimizer; affine gradients pass through unscaled.

use super::{
    AdderConv, AdderDense, BackboneCache, ConvCache, DenseCache, ForwardCache, Layer, Network,
    ResidualBlock, ResidualCache,
};
use crate::net::FeatureMap;

/// Gradient of one parameterized layer (weights + affine).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrads {
    pub weights: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl TensorGrads {
    fn zeros(weights: usize, channels: usize) -> Self {
        TensorGrads {
            weights: vec![0.0; weights],
            scale: vec![0.0; channels],
            shift: vec![0.0; channels],
        }
    }

    fn add_assign(&mut self, other: &TensorGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.scale.iter_mut().zip(&other.scale) {
            *a += b;
        }
        for (a, b) in self.shift.iter_mut().zip(&other.shift) {
            *a += b;
        }
    }

    fn scale_by(&mut self, f: f64) {
        for v in self
            .weights
            .iter_mut()
            .chain(self.scale.iter_mut())
            .chain(self.shift.iter_mut())
        {
            *v *= f;
        }
    }

    fn rescale_weights_to_sqrt_k(&mut self) {
        let k = self.weights.len() as f64;
        let norm = self.weights.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 0.0 {
            let f = k.sqrt() / norm;
            for g in &mut self.weights {
                *g *= f;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.scale.iter())
            .chain(self.shift.iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    Conv(TensorGrads),
    Residual(TensorGrads, TensorGrads),
}

/// Full-network gradients, shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<LayerGrads>,
    pub head_a: Vec<TensorGrads>,
    pub head_i: Vec<TensorGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let conv_zero = |c: &AdderConv| TensorGrads::zeros(c.weights.len(), c.out_ch);
        let backbone = net
            .backbone
            .iter()
            .map(|layer| match layer {
                Layer::Conv(c) => LayerGrads::Conv(conv_zero(c)),
                Layer::Residual(r) => {
                    LayerGrads::Residual(conv_zero(&r.conv_a), conv_zero(&r.conv_b))
                }
            })
            .collect();
        let head = |h: &[AdderDense]| {
            h.iter()
                .map(|d| TensorGrads::zeros(d.weights.len(), d.out_features))
                .collect::<Vec<_>>()
        };
        Gradients {
            backbone,
            head_a: head(&net.head_a),
            head_i: head(&net.head_i),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            match (a, b) {
                (LayerGrads::Conv(x), LayerGrads::Conv(y)) => x.add_assign(y),
                (LayerGrads::Residual(xa, xb), LayerGrads::Residual(ya, yb)) => {
                    xa.add_assign(ya);
                    xb.add_assign(yb);
                }
                _ => panic!("gradient shapes diverged"),
            }
        }
        for (a, b) in self.head_a.iter_mut().zip(&other.head_a) {
            a.add_assign(b);
        }
        for (a, b) in self.head_i.iter_mut().zip(&other.head_i) {
            a.add_assign(b);
        }
    }

    pub fn scale_by(&mut self, f: f64) {
        self.for_each_tensor_mut(|t| t.scale_by(f));
    }

    /// Per-tensor adaptive scaling of the adder-weight gradients: each
    /// weight tensor is rescaled to L2 norm sqrt(element count). Affine
    /// gradients are left untouched; an all-zero tensor stays zero.
    pub fn apply_adaptive_scaling(&mut self) {
        self.for_each_tensor_mut(TensorGrads::rescale_weights_to_sqrt_k);
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|t| ok &= t.all_finite());
        ok
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut TensorGrads)) {
        for layer in &mut self.backbone {
            match layer {
                LayerGrads::Conv(t) => f(t),
                LayerGrads::Residual(a, b) => {
                    f(a);
                    f(b);
                }
            }
        }
        for t in self.head_a.iter_mut().chain(self.head_i.iter_mut()) {
            f(t);
        }
    }

    fn for_each_tensor(&self, mut f: impl FnMut(&TensorGrads)) {
        for layer in &self.backbone {
            match layer {
                LayerGrads::Conv(t) => f(t),
                LayerGrads::Residual(a, b) => {
                    f(a);
                    f(b);
                }
            }
        }
        for t in self.head_a.iter().chain(self.head_i.iter()) {
            f(t);
        }
    }

    /// Flat vector in the same order as `Network::params_to_flat`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.for_each_tensor(|t| {
            flat.extend_from_slice(&t.weights);
            flat.extend_from_slice(&t.scale);
            flat.extend_from_slice(&t.shift);
        });
        flat
    }
}

#[inline]
fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Backward through one adder convolution. `d_out` is the gradient at
/// the layer output; returns parameter gradients and the gradient at
/// the layer input.
pub fn conv_backward(
    conv: &AdderConv,
    cache: &ConvCache,
    d_out: &FeatureMap,
) -> (TensorGrads, FeatureMap) {
    let mut grads = TensorGrads::zeros(conv.weights.len(), conv.out_ch);
    let mut d_in = FeatureMap::zeros(cache.input.channels, cache.input.len);
    let out_len = cache.out.len;
    for co in 0..conv.out_ch {
        let sc = conv.scale[co];
        for wo in 0..out_len {
            let mut dz = d_out.at(co, wo);
            if conv.relu && cache.pre_relu.at(co, wo) <= 0.0 {
                dz = 0.0;
            }
            if dz == 0.0 {
                continue;
            }
            grads.scale[co] += dz * cache.pre_affine.at(co, wo);
            grads.shift[co] += dz;
            let ds = dz * sc;
            let base = wo * conv.stride;
            for ci in 0..conv.in_ch {
                let widx = (co * conv.in_ch + ci) * conv.kernel;
                for k in 0..conv.kernel {
                    let x = cache.input.at(ci, base + k);
                    let w = conv.weights[widx + k];
                    grads.weights[widx + k] += ds * (x - w);
                    d_in.data[ci * d_in.len + base + k] += ds * clamp_unit(w - x);
                }
            }
        }
    }
    (grads, d_in)
}

/// Backward through one adder dense layer.
pub fn dense_backward(
    dense: &AdderDense,
    cache: &DenseCache,
    d_out: &[f64],
) -> (TensorGrads, Vec<f64>) {
    let mut grads = TensorGrads::zeros(dense.weights.len(), dense.out_features);
    let mut d_in = vec![0.0; dense.in_features];
    for o in 0..dense.out_features {
        let mut dz = d_out[o];
        if dense.relu && cache.pre_relu[o] <= 0.0 {
            dz = 0.0;
        }
        if dz == 0.0 {
            continue;
        }
        grads.scale[o] += dz * cache.pre_affine[o];
        grads.shift[o] += dz;
        let ds = dz * dense.scale[o];
        let ws = &dense.weights[o * dense.in_features..(o + 1) * dense.in_features];
        for i in 0..dense.in_features {
            let x = cache.input[i];
            let w = ws[i];
            grads.weights[o * dense.in_features + i] += ds * (x - w);
            d_in[i] += ds * clamp_unit(w - x);
        }
    }
    (grads, d_in)
}

/// Backward through the residual block: ReLU mask from the summed
/// pre-activation, then the two convolutions in reverse, with the skip
/// path adding the masked gradient back at the crop offset.
pub fn residual_backward(
    block: &ResidualBlock,
    cache: &ResidualCache,
    d_out: &FeatureMap,
) -> (TensorGrads, TensorGrads, FeatureMap) {
    let mut dz = d_out.clone();
    for (g, &pre) in dz.data.iter_mut().zip(&cache.pre_relu_sum.data) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    let (gb, d_a) = conv_backward(&block.conv_b, &cache.b, &dz);
    let (ga, mut d_in) = conv_backward(&block.conv_a, &cache.a, &d_a);
    let crop = block.crop();
    for c in 0..dz.channels {
        for t in 0..dz.len {
            d_in.data[c * d_in.len + t + crop] += dz.at(c, t);
        }
    }
    (ga, gb, d_in)
}

fn head_backward(
    head: &[AdderDense],
    caches: &[DenseCache],
    d_scalar: f64,
) -> (Vec<TensorGrads>, Vec<f64>) {
    let mut grads: Vec<Option<TensorGrads>> = vec![None; head.len()];
    let mut d_cur = vec![d_scalar];
    for idx in (0..head.len()).rev() {
        let (g, d_in) = dense_backward(&head[idx], &caches[idx], &d_cur);
        grads[idx] = Some(g);
        d_cur = d_in;
    }
    (grads.into_iter().map(Option::unwrap).collect(), d_cur)
}

/// Full backward pass from per-output loss gradients `d_output` to
/// gradients for every parameter.
pub fn backward(net: &Network, cache: &ForwardCache, d_output: [f64; 2]) -> Gradients {
    let (head_a, d_flat_a) = head_backward(&net.head_a, &cache.head_a, d_output[0]);
    let (head_i, d_flat_i) = head_backward(&net.head_i, &cache.head_i, d_output[1]);

    let last_map = match cache.backbone.last() {
        Some(BackboneCache::Conv(c)) => &c.out,
        Some(BackboneCache::Residual(r)) => &r.out,
        None => unreachable!("backbone is never empty"),
    };
    let mut d_map = FeatureMap::zeros(last_map.channels, last_map.len);
    for (d, (a, b)) in d_map.data.iter_mut().zip(d_flat_a.iter().zip(&d_flat_i)) {
        *d = a + b;
    }

    let mut backbone: Vec<Option<LayerGrads>> = vec![None; net.backbone.len()];
    for idx in (0..net.backbone.len()).rev() {
        match (&net.backbone[idx], &cache.backbone[idx]) {
            (Layer::Conv(c), BackboneCache::Conv(cc)) => {
                let (g, d_in) = conv_backward(c, cc, &d_map);
                backbone[idx] = Some(LayerGrads::Conv(g));
                d_map = d_in;
            }
            (Layer::Residual(r), BackboneCache::Residual(rc)) => {
                let (ga, gb, d_in) = residual_backward(r, rc, &d_map);
                backbone[idx] = Some(LayerGrads::Residual(ga, gb));
                d_map = d_in;
            }
            _ => panic!("cache shape diverged from network"),
        }
    }
    Gradients {
        backbone: backbone.into_iter().map(Option::unwrap).collect(),
        head_a,
        head_i,
    }
}
