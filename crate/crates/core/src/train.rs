//! Training loop for the adder network: RMSProp over surrogate
//! gradients, per-tensor adaptive gradient rescaling, early stopping on
//! a validation set, and bitwise-deterministic results for a given seed
//! regardless of worker count.
//!
//! Determinism comes from a fixed reduction shape: every batch is split
//! into fixed-size chunks, each chunk's gradient is accumulated
//! sequentially in sample order, and chunk partials are combined in
//! chunk order. The schedule is identical whether chunks run on one
//! thread or many, so the floating-point sums are too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binning::LogBinning;
use crate::decay::LabeledDecay;
use crate::error::{Error, Result};
use crate::exec;
use crate::net::backward::{backward, Gradients};
use crate::net::{build_flan, normalize_input, AdderConv, FeatureMap, Layer, Network, Variant};

/// Samples per deterministic reduction chunk.
const GRAD_CHUNK: usize = 16;

/// One network-ready training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Unit-peak normalized curve at the network's input length.
    pub input: Vec<f64>,
    /// Ground-truth amplitude- and intensity-averaged lifetimes.
    pub target: [f64; 2],
}

/// Convert labeled decays into network inputs: optional log-scale
/// merging, then unit-peak normalization.
pub fn prepare_samples(
    records: &[LabeledDecay],
    binning: Option<&LogBinning>,
) -> Result<Vec<TrainSample>> {
    records
        .iter()
        .map(|rec| {
            let counts = match binning {
                Some(b) => b.merge(&rec.histogram)?.counts,
                None => rec.histogram.counts.clone(),
            };
            Ok(TrainSample {
                input: normalize_input(&counts),
                target: [rec.label.tau_a, rec.label.tau_i],
            })
        })
        .collect()
}

/// Hyperparameters; the defaults are the reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// RMSProp second-moment smoothing factor.
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            rmsprop_decay: 0.995,
            rmsprop_eps: 1e-8,
            patience: 20,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::InvalidConfig("rmsprop_decay must be in [0, 1)".into()));
        }
        if !(self.rmsprop_eps > 0.0) {
            return Err(Error::InvalidConfig("rmsprop_eps must be > 0".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss on one sample: squared error summed over the two outputs.
pub fn sample_loss(pred: [f64; 2], target: [f64; 2]) -> f64 {
    let d0 = pred[0] - target[0];
    let d1 = pred[1] - target[1];
    d0 * d0 + d1 * d1
}

/// Batch loss: mean over items of the per-item two-output squared
/// error sum.
pub fn mse_loss(preds: &[[f64; 2]], targets: &[[f64; 2]]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss needs matching non-empty prediction/target lists, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| sample_loss(*p, *t))
        .sum();
    Ok(total / preds.len() as f64)
}

fn chunk_forward_backward(net: &Network, chunk: &[TrainSample]) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for sample in chunk {
        let cache = net.forward_cached(&sample.input)?;
        let p = cache.output;
        loss += sample_loss(p, sample.target);
        let d_out = [
            2.0 * (p[0] - sample.target[0]),
            2.0 * (p[1] - sample.target[1]),
        ];
        let g = backward(net, &cache, d_out);
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

fn batch_gradient_impl(
    net: &Network,
    batch: &[TrainSample],
    sequential: bool,
) -> Result<(f64, Gradients)> {
    let chunks: Vec<&[TrainSample]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = if sequential {
        exec::map_slice_seq(&chunks, |chunk| chunk_forward_backward(net, chunk))
    } else {
        exec::map_slice(&chunks, |chunk| chunk_forward_backward(net, chunk))
    };
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for partial in partials {
        let (l, g) = partial?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale_by(inv);
    Ok((loss * inv, total))
}

/// Mean loss and mean parameter gradients over a batch.
pub fn batch_gradient(net: &Network, batch: &[TrainSample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidParams("empty batch".into()));
    }
    batch_gradient_impl(net, batch, false)
}

/// Same reduction on one thread; exists to demonstrate the parallel
/// path is bitwise identical.
pub fn batch_gradient_sequential(net: &Network, batch: &[TrainSample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidParams("empty batch".into()));
    }
    batch_gradient_impl(net, batch, true)
}

/// Mean loss over a dataset, deterministic chunked reduction.
pub fn dataset_loss(net: &Network, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParams("empty dataset".into()));
    }
    let chunks: Vec<&[TrainSample]> = samples.chunks(GRAD_CHUNK).collect();
    let partials = exec::map_slice(&chunks, |chunk| -> Result<f64> {
        let mut loss = 0.0;
        for s in *chunk {
            loss += sample_loss(net.forward(&s.input)?, s.target);
        }
        Ok(loss)
    });
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / samples.len() as f64)
}

/// RMSProp with a per-parameter second-moment accumulator.
pub struct RmsProp {
    v: Vec<f64>,
    lr: f64,
    decay: f64,
    eps: f64,
}

impl RmsProp {
    pub fn new(param_count: usize, lr: f64, decay: f64, eps: f64) -> Self {
        RmsProp {
            v: vec![0.0; param_count],
            lr,
            decay,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.v.len());
        debug_assert_eq!(grads.len(), self.v.len());
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *p -= self.lr * g / (v.sqrt() + self.eps);
        }
    }

    /// Second-moment accumulator (diagnostic).
    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }
}

/// Per-epoch record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of a training run; the returned network carries the
/// best-validation snapshot, not the last epoch's parameters.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub network: Network,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn fill_uniform(rng: &mut ChaCha8Rng, ws: &mut [f64]) {
    for w in ws {
        *w = rng.gen_range(-1.0..1.0);
    }
}

/// Mean/std of pre-affine sums per output channel across probe maps.
fn channel_stats(sums: &[FeatureMap], out_ch: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; out_ch];
    let mut count = 0usize;
    for m in sums {
        count += m.len;
        for co in 0..out_ch {
            mean[co] += m.row(co).iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= count as f64;
    }
    let mut var = vec![0.0; out_ch];
    for m in sums {
        for co in 0..out_ch {
            var[co] += m.row(co).iter().map(|x| (x - mean[co]).powi(2)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count as f64;
    }
    (mean, var)
}

fn calibrate_conv(c: &mut AdderConv, inputs: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    let sums = inputs
        .iter()
        .map(|x| c.raw_sums(x))
        .collect::<Result<Vec<_>>>()?;
    let (mean, var) = channel_stats(&sums, c.out_ch);
    for co in 0..c.out_ch {
        let std = var[co].sqrt();
        let scale = if std > 1e-6 { 1.0 / std } else { 1.0 };
        c.scale[co] = scale;
        c.shift[co] = -mean[co] * scale;
    }
    inputs.iter().map(|x| c.forward(x)).collect()
}

/// Data-driven initialization: weights drawn uniformly, then each
/// layer's affine set from probe-batch statistics so activations start
/// standardized and each head's final layer starts in the units of its
/// own label.
fn initialize(variant: Variant, samples: &[TrainSample], seed: u64) -> Result<Network> {
    let mut net = build_flan(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xA11);
    for layer in &mut net.backbone {
        match layer {
            Layer::Conv(c) => fill_uniform(&mut rng, &mut c.weights),
            Layer::Residual(r) => {
                fill_uniform(&mut rng, &mut r.conv_a.weights);
                fill_uniform(&mut rng, &mut r.conv_b.weights);
            }
        }
    }
    for head in [&mut net.head_a, &mut net.head_i] {
        for d in head.iter_mut() {
            fill_uniform(&mut rng, &mut d.weights);
        }
    }

    let probe_n = samples.len().min(256);
    let probe = &samples[..probe_n];

    // Label statistics give each head's output layer its range.
    let n = samples.len() as f64;
    let mut t_mean = [0.0f64; 2];
    for s in samples {
        t_mean[0] += s.target[0];
        t_mean[1] += s.target[1];
    }
    t_mean[0] /= n;
    t_mean[1] /= n;
    let mut t_var = [0.0f64; 2];
    for s in samples {
        t_var[0] += (s.target[0] - t_mean[0]).powi(2);
        t_var[1] += (s.target[1] - t_mean[1]).powi(2);
    }
    t_var[0] /= n;
    t_var[1] /= n;

    let mut maps: Vec<FeatureMap> = probe
        .iter()
        .map(|s| FeatureMap::from_vec(1, s.input.len(), s.input.clone()))
        .collect::<Result<Vec<_>>>()?;

    for layer in &mut net.backbone {
        match layer {
            Layer::Conv(c) => {
                maps = calibrate_conv(c, &maps)?;
            }
            Layer::Residual(r) => {
                let mid = calibrate_conv(&mut r.conv_a, &maps)?;
                calibrate_conv(&mut r.conv_b, &mid)?;
                maps = maps
                    .iter()
                    .map(|x| r.forward(x))
                    .collect::<Result<Vec<_>>>()?;
            }
        }
    }

    let flat_feats: Vec<Vec<f64>> = maps.iter().map(|m| m.data.clone()).collect();
    for (t_idx, head) in [(0usize, &mut net.head_a), (1usize, &mut net.head_i)] {
        let n_layers = head.len();
        let mut cur = flat_feats.clone();
        for (li, d) in head.iter_mut().enumerate() {
            let sums: Vec<Vec<f64>> = cur
                .iter()
                .map(|x| d.raw_sums(x))
                .collect::<Result<Vec<_>>>()?;
            let count = sums.len() as f64;
            for o in 0..d.out_features {
                let mean = sums.iter().map(|s| s[o]).sum::<f64>() / count;
                let var = sums.iter().map(|s| (s[o] - mean).powi(2)).sum::<f64>() / count;
                let std = var.sqrt();
                if li + 1 == n_layers {
                    // Output layer: map activation statistics onto the
                    // head's own label distribution.
                    let scale = if std > 1e-6 {
                        t_var[t_idx].sqrt().max(1e-3) / std
                    } else {
                        1.0
                    };
                    d.scale[o] = scale;
                    d.shift[o] = t_mean[t_idx] - scale * mean;
                } else {
                    let scale = if std > 1e-6 { 1.0 / std } else { 1.0 };
                    d.scale[o] = scale;
                    d.shift[o] = -mean * scale;
                }
            }
            cur = cur
                .iter()
                .map(|x| d.forward(x))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    Ok(net)
}

/// Train a fresh network of the given variant against an explicit
/// validation set (pass an empty slice to validate on the training
/// set). See [`train_with_progress`] for a per-epoch callback.
pub fn train(
    variant: Variant,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_progress(variant, train_set, val_set, cfg, |_| {})
}

pub fn train_with_progress(
    variant: Variant,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidParams("no training samples".into()));
    }
    let expect = variant.input_len();
    if let Some(bad) = train_set
        .iter()
        .chain(val_set.iter())
        .find(|s| s.input.len() != expect)
    {
        return Err(Error::ShapeMismatch(format!(
            "sample has {} bins, {} expects {}",
            bad.input.len(),
            variant.name(),
            expect
        )));
    }
    let val_set: &[TrainSample] = if val_set.is_empty() { train_set } else { val_set };

    let mut net = initialize(variant, train_set, cfg.seed)?;
    let mut params = net.params_to_flat();
    let mut opt = RmsProp::new(
        params.len(),
        cfg.learning_rate,
        cfg.rmsprop_decay,
        cfg.rmsprop_eps,
    );

    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut history = Vec::new();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch_buf: Vec<TrainSample> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(0x5E_0000 + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idx_chunk in order.chunks(cfg.batch_size) {
            batch_buf.clear();
            batch_buf.extend(idx_chunk.iter().map(|&i| train_set[i].clone()));
            let (loss, mut grads) = batch_gradient(&net, &batch_buf)?;
            if !grads.all_finite() || !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradients in epoch {epoch}; aborting training"
                )));
            }
            grads.apply_adaptive_scaling();
            let flat = grads.flatten();
            opt.step(&mut params, &flat);
            net.set_params_from_flat(&params)?;
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = dataset_loss(&net, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric("training diverged to non-finite loss".into()));
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&stats);
        history.push(stats);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    net.set_params_from_flat(&best_params)?;
    Ok(TrainReport {
        network: net,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}
