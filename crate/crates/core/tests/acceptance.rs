//! Release gates for the whole pipeline. Each test checks one shipping
//! criterion end to end and prints a single `criterion NN: PASS` line
//! with the measured numbers (visible with `--nocapture`); a failure
//! panics with the matching `criterion NN: FAIL` message.
//!
//! The tests serialize themselves on a global mutex so that wall-clock
//! budgets are measured with the machine to themselves, and the slow
//! desk-scale fixture (datasets + two trained models) is built once and
//! shared.

use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flan_core::baselines::nlsf::{nlsf_fit, NlsfOptions};
use flan_core::baselines::phasor::phasor_coords;
use flan_core::binning::LogBinning;
use flan_core::decay::{
    gen_dataset, synthesize_decay, tau_labels, DatasetSpec, DecayParams, InstrumentConfig,
    LabeledDecay, PhotonRegime,
};
use flan_core::eval::{
    bench_network_float, gen_gt_image, mse_eval, predict_image_float, GtImageSpec, MseReport,
};
use flan_core::histogram::{Histogram, LifetimePair};
use flan_core::net::backward::{conv_backward, dense_backward, residual_backward};
use flan_core::net::bn::BnParams;
use flan_core::net::fixed::{quantize_network_default, FixedConv, FixedMap, QuantizedNetwork};
use flan_core::net::{build_flan, AdderConv, AdderDense, FeatureMap, Network, ResidualBlock, Variant};
use flan_core::quantize::{QFormat, SaturationCounter, Q10_10, Q16_16};
use flan_core::train::{mse_loss, prepare_samples, train, TrainConfig, TrainSample};
use flan_core::{io, Result};

/// Serializes the suite: budgets below are wall-clock and the box has
/// to be quiet for them to mean anything.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

/// Relative error with a floor on the denominator.
fn rel(measured: f64, reference: f64, floor: f64) -> f64 {
    (measured - reference).abs() / reference.abs().max(floor)
}

// ---------------------------------------------------------------------
// Desk-scale fixture: the reference training recipe, built once.
// ---------------------------------------------------------------------

struct Fixture {
    binning: LogBinning,
    test_records: Vec<LabeledDecay>,
    flan: Network,
    flan_ls: Network,
    flan_q: QuantizedNetwork,
    flan_ls_q: QuantizedNetwork,
    /// Dataset generation plus both trainings.
    train_wall: Duration,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// Serialization roundtrip: what training sees after a dataset has been
/// written to disk and read back (labels pass through f32 storage).
fn stored(records: Vec<LabeledDecay>) -> Vec<LabeledDecay> {
    io::read_dataset(&io::write_dataset(&records).unwrap()).unwrap()
}

/// Serialization roundtrip for a trained model (parameters pass through
/// f32 storage), so every downstream check scores the artifact a
/// deployment would actually load, not the in-memory training result.
fn stored_net(network: Network) -> Network {
    let bytes = io::write_model(&io::ModelFile {
        network,
        quant: None,
    })
    .unwrap();
    io::read_model(&bytes).unwrap().network
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let t0 = Instant::now();
        let train_records = stored(gen_dataset(&DatasetSpec::new(5000, 101)).unwrap());
        let val_records = stored(gen_dataset(&DatasetSpec::new(1000, 102)).unwrap());
        let test_records =
            stored(gen_dataset(&DatasetSpec::with_regime(1000, 103, PhotonRegime::High)).unwrap());
        let binning = LogBinning::new(256, 80).unwrap();

        let tr_full = prepare_samples(&train_records, None).unwrap();
        let va_full = prepare_samples(&val_records, None).unwrap();
        let tr_merged = prepare_samples(&train_records, Some(&binning)).unwrap();
        let va_merged = prepare_samples(&val_records, Some(&binning)).unwrap();

        // The deep variant needs the lower rate to train stably; the
        // compact variant converges quickly at the default rate.
        let flan_cfg = TrainConfig {
            max_epochs: 150,
            batch_size: 128,
            learning_rate: 3e-4,
            patience: 100,
            seed: 11,
            ..TrainConfig::default()
        };
        let flan = stored_net(
            train(Variant::Flan, &tr_full, &va_full, &flan_cfg)
                .unwrap()
                .network,
        );

        let ls_cfg = TrainConfig {
            max_epochs: 80,
            batch_size: 128,
            learning_rate: 1e-3,
            patience: 25,
            seed: 7,
            ..TrainConfig::default()
        };
        let flan_ls = stored_net(
            train(Variant::FlanLs, &tr_merged, &va_merged, &ls_cfg)
                .unwrap()
                .network,
        );
        let train_wall = t0.elapsed();

        let flan_q = quantize_network_default(&flan).unwrap();
        let flan_ls_q = quantize_network_default(&flan_ls).unwrap();

        Fixture {
            binning,
            test_records,
            flan,
            flan_ls,
            flan_q,
            flan_ls_q,
            train_wall,
        }
    })
}

/// Network input counts for one record under a variant's view.
fn variant_counts(fix: &Fixture, variant: Variant, rec: &LabeledDecay) -> Vec<u32> {
    match variant {
        Variant::Flan => rec.histogram.counts.clone(),
        Variant::FlanLs => fix.binning.merge(&rec.histogram).unwrap().counts,
    }
}

/// Float predictions of a fixture model over the fixture test set.
fn test_predictions(fix: &Fixture, variant: Variant) -> Vec<LifetimePair> {
    let net = match variant {
        Variant::Flan => &fix.flan,
        Variant::FlanLs => &fix.flan_ls,
    };
    fix.test_records
        .iter()
        .map(|rec| net.predict(&variant_counts(fix, variant, rec)).unwrap())
        .collect()
}

fn test_labels(fix: &Fixture) -> Vec<LifetimePair> {
    fix.test_records.iter().map(|r| r.label).collect()
}

fn rmse_per_target(preds: &[LifetimePair], labels: &[LifetimePair]) -> (f64, f64) {
    let n = preds.len() as f64;
    let (mut sa, mut si) = (0.0, 0.0);
    for (p, l) in preds.iter().zip(labels) {
        sa += (p.tau_a - l.tau_a).powi(2);
        si += (p.tau_i - l.tau_i).powi(2);
    }
    ((sa / n).sqrt(), (si / n).sqrt())
}

// ---------------------------------------------------------------------
// criterion 01 — adder convolution vs a brute-force oracle
// ---------------------------------------------------------------------

/// Brute-force float reference: negated L1 window scores accumulated
/// kernel-tap innermost, channel outer, then the per-channel affine and
/// optional ReLU. Mirrors the accumulation order so float equality is
/// exact, not approximate.
fn oracle_conv_float(conv: &AdderConv, x: &FeatureMap) -> Vec<f64> {
    let out_len = (x.len - conv.kernel) / conv.stride + 1;
    let mut out = vec![0.0; conv.out_ch * out_len];
    for co in 0..conv.out_ch {
        for wo in 0..out_len {
            let base = wo * conv.stride;
            let mut acc = 0.0;
            for ci in 0..conv.in_ch {
                for k in 0..conv.kernel {
                    let xv = x.data[ci * x.len + base + k];
                    let wv = conv.weights[(co * conv.in_ch + ci) * conv.kernel + k];
                    acc += (xv - wv).abs();
                }
            }
            let z = conv.scale[co] * -acc + conv.shift[co];
            out[co * out_len + wo] = if conv.relu { z.max(0.0) } else { z };
        }
    }
    out
}

/// Brute-force integer reference for the fixed path: same window walk in
/// plain nested loops, i64 scores, i128 affine, divide-by-2^F rounding
/// half away from zero, ReLU, then one clamp into the feature-map range.
fn oracle_conv_fixed(
    fc: &FixedConv,
    x: &FixedMap,
    fm: QFormat,
    param: QFormat,
) -> (Vec<i64>, SaturationCounter) {
    let align = fm.frac_bits - param.frac_bits;
    let out_len = (x.len - fc.kernel) / fc.stride + 1;
    let mut out = vec![0i64; fc.out_ch * out_len];
    let mut sat = SaturationCounter::default();
    for co in 0..fc.out_ch {
        for wo in 0..out_len {
            let base = wo * fc.stride;
            let mut acc: i64 = 0;
            for ci in 0..fc.in_ch {
                for k in 0..fc.kernel {
                    let xv = x.data[ci * x.len + base + k];
                    let wv = fc.weights_raw[(co * fc.in_ch + ci) * fc.kernel + k] << align;
                    acc += (xv - wv).abs();
                }
            }
            let wide = (-acc) as i128 * fc.scale_raw[co] as i128
                + ((fc.shift_raw[co] as i128) << fm.frac_bits);
            let mut v = {
                let bits = param.frac_bits;
                let half = 1i128 << (bits - 1);
                if wide >= 0 {
                    (wide + half) >> bits
                } else {
                    -((-wide + half) >> bits)
                }
            };
            if fc.relu && v < 0 {
                v = 0;
            }
            sat.total += 1;
            let narrowed = if v < fm.raw_min() as i128 {
                sat.clipped += 1;
                fm.raw_min()
            } else if v > fm.raw_max() as i128 {
                sat.clipped += 1;
                fm.raw_max()
            } else {
                v as i64
            };
            out[co * out_len + wo] = narrowed;
        }
    }
    (out, sat)
}

#[test]
fn criterion_01_adder_conv_matches_brute_force() {
    let _g = gate();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC01);
    let (fm, param) = (Q16_16, Q10_10);
    for case in 0..1000 {
        let in_ch = rng.gen_range(1..=3);
        let out_ch = rng.gen_range(1..=3);
        let kernel = rng.gen_range(1..=5);
        let stride = rng.gen_range(1..=2);
        let relu = rng.gen_bool(0.5);
        let in_len = kernel + rng.gen_range(0..10);

        let mut conv = AdderConv::new(in_ch, out_ch, kernel, stride, relu);
        for w in &mut conv.weights {
            *w = rng.gen_range(-2.0..2.0);
        }
        for s in &mut conv.scale {
            *s = rng.gen_range(-2.0..2.0);
        }
        for s in &mut conv.shift {
            *s = rng.gen_range(-2.0..2.0);
        }
        let data: Vec<f64> = (0..in_ch * in_len)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let x = FeatureMap::from_vec(in_ch, in_len, data).unwrap();

        // Float path: exact equality, bit for bit.
        let y = conv.forward(&x).unwrap();
        let want = oracle_conv_float(&conv, &x);
        assert_eq!(y.data.len(), want.len(), "criterion 01: FAIL — shape");
        for (i, (&got, &exp)) in y.data.iter().zip(&want).enumerate() {
            assert!(
                got.to_bits() == exp.to_bits(),
                "criterion 01: FAIL — float case {case} slot {i}: {got} vs oracle {exp}"
            );
        }

        // Fixed path: bit-exact integers and identical clip accounting.
        let mut enc_sat = SaturationCounter::default();
        let fc = FixedConv::from_float(&conv, fm, param, &mut enc_sat).unwrap();
        let xq = FixedMap {
            channels: in_ch,
            len: in_len,
            data: x.data.iter().map(|&v| fm.encode(v)).collect(),
        };
        let mut sat_impl = SaturationCounter::default();
        let yq = fc.forward(&xq, fm, param, &mut sat_impl).unwrap();
        let (want_q, sat_want) = oracle_conv_fixed(&fc, &xq, fm, param);
        assert!(
            yq.data == want_q,
            "criterion 01: FAIL — fixed case {case}: {:?} vs oracle {:?}",
            yq.data,
            want_q
        );
        assert!(
            sat_impl == sat_want,
            "criterion 01: FAIL — fixed case {case} clip accounting: {sat_impl:?} vs {sat_want:?}"
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        secs < 10.0,
        "criterion 01: FAIL — 1000 cases took {secs:.2} s (budget 10 s)"
    );
    println!("criterion 01: PASS — 1000 random conv instances float-exact and fixed bit-exact in {secs:.2} s");
}

// ---------------------------------------------------------------------
// criterion 02 — normalization fold differential
// ---------------------------------------------------------------------

#[test]
fn criterion_02_normalization_fold_is_exact() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC02);
    let n = 10_000;
    let gamma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..4.0)).collect();
    let beta: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let var: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..9.0)).collect();
    let p = BnParams::new(gamma, beta, mean, var).unwrap();
    let (sc, sh) = p.fold();
    let mut worst = 0.0f64;
    for ch in 0..n {
        let x = rng.gen_range(-10.0..10.0);
        let direct = p.apply_direct(ch, x);
        let folded = sc[ch] * x + sh[ch];
        worst = worst.max(rel(folded, direct, 1e-6));
    }
    assert!(
        worst <= 1e-6,
        "criterion 02: FAIL — worst relative fold error {worst:.3e} over {n} channels"
    );
    println!("criterion 02: PASS — fold differential ≤ 1e-6 over {n} random channels (worst {worst:.3e})");
}

// ---------------------------------------------------------------------
// criterion 03 — log-scale merging conserves photons
// ---------------------------------------------------------------------

#[test]
fn criterion_03_log_binning_conserves_photons() {
    let _g = gate();
    let binning = LogBinning::new(256, 80).unwrap();

    // Edge layout: a partition of [0, 256) whose 80 widths sum to 256,
    // from the geometric-progression ratio (frozen by bisection on
    // sum_{j<80} r^j = 256).
    let edges = binning.edges();
    assert!(
        edges.len() == 81 && edges[0] == 0 && edges[80] == 256,
        "criterion 03: FAIL — edge endpoints {:?}",
        (edges.len(), edges.first(), edges.last())
    );
    assert!(
        edges.windows(2).all(|w| w[0] < w[1]),
        "criterion 03: FAIL — edges not strictly increasing"
    );
    let width_sum: usize = binning.widths().iter().sum();
    assert!(
        width_sum == 256,
        "criterion 03: FAIL — widths sum to {width_sum}, expected 256"
    );
    let ratio = binning.ratio();
    assert!(
        (ratio - 1.025595458945).abs() < 1e-6,
        "criterion 03: FAIL — ratio {ratio:.9} vs frozen 1.025595459"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0xAC03);
    for case in 0..10_000 {
        let counts: Vec<u32> = (0..256).map(|_| rng.gen_range(0..5000)).collect();
        let h = Histogram::new(counts, 0.03906);
        let merged = binning.merge(&h).unwrap();
        assert!(
            merged.len() == 80 && merged.total() == h.total(),
            "criterion 03: FAIL — case {case}: total {} became {}",
            h.total(),
            merged.total()
        );
    }
    println!("criterion 03: PASS — 10000 random histograms conserved exactly; ratio {ratio:.9}, widths sum 256");
}

// ---------------------------------------------------------------------
// criterion 04 — encode/decode round-trip bound
// ---------------------------------------------------------------------

#[test]
fn criterion_04_quantization_round_trip_bound() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC04);
    for fmt in [Q10_10, Q16_16] {
        let f = fmt.frac_bits;
        let bound = 0.5 * fmt.resolution();
        let lo = fmt.raw_min() as f64 * fmt.resolution();
        let hi = fmt.raw_max() as f64 * fmt.resolution();
        let mut worst = 0.0f64;
        for _ in 0..1_000_000 {
            let x = rng.gen_range(lo..=hi);
            let err = (fmt.decode(fmt.encode(x)) - x).abs();
            worst = worst.max(err);
            assert!(
                err <= bound,
                "criterion 04: FAIL — {fmt}: |round-trip − x| = {err:.3e} > 2^-({f}+1)"
            );
        }
        println!(
            "criterion 04: PASS — {fmt}: 1e6 round trips within 2^-{} (worst {worst:.3e})",
            f + 1
        );
    }
}

// ---------------------------------------------------------------------
// criterion 05 — gradient checks
// ---------------------------------------------------------------------

/// Weighted-sum objective over a conv output with fixed coefficients.
fn conv_objective(conv: &AdderConv, x: &FeatureMap, coef: &[f64]) -> f64 {
    conv.forward(x)
        .unwrap()
        .data
        .iter()
        .zip(coef)
        .map(|(y, c)| y * c)
        .sum()
}

fn residual_objective(block: &ResidualBlock, x: &FeatureMap, coef: &[f64]) -> f64 {
    block
        .forward(x)
        .unwrap()
        .data
        .iter()
        .zip(coef)
        .map(|(y, c)| y * c)
        .sum()
}

fn dense_objective(dense: &AdderDense, x: &[f64], coef: &[f64]) -> f64 {
    dense
        .forward(x)
        .unwrap()
        .iter()
        .zip(coef)
        .map(|(y, c)| y * c)
        .sum()
}

#[test]
fn criterion_05_gradients_match_finite_differences() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC05);
    let h = 1e-5;
    let tol = 1e-5;
    let mut worst = 0.0f64;

    // Per-channel affine (scale, shift) and ReLU through a convolution,
    // checked on kink-free instances (every pre-activation away from 0).
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < 20 && attempts < 400 {
        attempts += 1;
        let in_ch = rng.gen_range(1..=3);
        let out_ch = rng.gen_range(1..=3);
        let kernel = rng.gen_range(1..=3);
        let in_len = kernel + rng.gen_range(2..8);
        let mut conv = AdderConv::new(in_ch, out_ch, kernel, 1, rng.gen_bool(0.5));
        for w in &mut conv.weights {
            *w = rng.gen_range(-1.5..1.5);
        }
        for s in &mut conv.scale {
            *s = rng.gen_range(0.3..1.5) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        }
        for s in &mut conv.shift {
            *s = rng.gen_range(-1.0..1.0);
        }
        let x = FeatureMap::from_vec(
            in_ch,
            in_len,
            (0..in_ch * in_len).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let cache = conv.forward_cached(&x).unwrap();
        if cache.pre_relu.data.iter().any(|v| v.abs() < 1e-3) {
            continue; // too close to the ReLU kink for a clean difference
        }
        accepted += 1;
        let out_elems = cache.out.data.len();
        let coef: Vec<f64> = (0..out_elems).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out = FeatureMap::from_vec(out_ch, cache.out.len, coef.clone()).unwrap();
        let (grads, _) = conv_backward(&conv, &cache, &d_out);
        for co in 0..out_ch {
            for is_shift in [false, true] {
                let analytic = if is_shift { grads.shift[co] } else { grads.scale[co] };
                let keep = if is_shift { conv.shift[co] } else { conv.scale[co] };
                let set = |conv: &mut AdderConv, v: f64| {
                    if is_shift {
                        conv.shift[co] = v;
                    } else {
                        conv.scale[co] = v;
                    }
                };
                set(&mut conv, keep + h);
                let up = conv_objective(&conv, &x, &coef);
                set(&mut conv, keep - h);
                let down = conv_objective(&conv, &x, &coef);
                set(&mut conv, keep);
                let fd = (up - down) / (2.0 * h);
                let err = rel(analytic, fd, 1e-3);
                worst = worst.max(err);
                assert!(
                    err <= tol,
                    "criterion 05: FAIL — conv affine channel {co}: analytic {analytic} vs FD {fd}"
                );
            }
        }
    }
    assert!(
        accepted == 20,
        "criterion 05: FAIL — only {accepted} kink-free conv instances in {attempts} attempts"
    );

    // Dense affine and ReLU, same protocol.
    let mut accepted_d = 0;
    attempts = 0;
    while accepted_d < 20 && attempts < 400 {
        attempts += 1;
        let n_in = rng.gen_range(3..10);
        let n_out = rng.gen_range(1..5);
        let mut dense = AdderDense::new(n_in, n_out, rng.gen_bool(0.5));
        for w in &mut dense.weights {
            *w = rng.gen_range(-1.5..1.5);
        }
        for s in &mut dense.scale {
            *s = rng.gen_range(0.3..1.5) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        }
        for s in &mut dense.shift {
            *s = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pre_affine = dense.raw_sums(&x).unwrap();
        let pre_relu: Vec<f64> = pre_affine
            .iter()
            .enumerate()
            .map(|(o, s)| dense.scale[o] * s + dense.shift[o])
            .collect();
        if pre_relu.iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        accepted_d += 1;
        let out = dense.forward(&x).unwrap();
        let coef: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = flan_core::net::DenseCache {
            input: x.clone(),
            pre_affine,
            pre_relu,
            out,
        };
        let (grads, _) = dense_backward(&dense, &cache, &coef);
        for o in 0..n_out {
            for is_shift in [false, true] {
                let analytic = if is_shift { grads.shift[o] } else { grads.scale[o] };
                let keep = if is_shift { dense.shift[o] } else { dense.scale[o] };
                let set = |dense: &mut AdderDense, v: f64| {
                    if is_shift {
                        dense.shift[o] = v;
                    } else {
                        dense.scale[o] = v;
                    }
                };
                set(&mut dense, keep + h);
                let up = dense_objective(&dense, &x, &coef);
                set(&mut dense, keep - h);
                let down = dense_objective(&dense, &x, &coef);
                set(&mut dense, keep);
                let fd = (up - down) / (2.0 * h);
                let err = rel(analytic, fd, 1e-3);
                worst = worst.max(err);
                assert!(
                    err <= tol,
                    "criterion 05: FAIL — dense affine output {o}: analytic {analytic} vs FD {fd}"
                );
            }
        }
    }
    assert!(
        accepted_d == 20,
        "criterion 05: FAIL — only {accepted_d} kink-free dense instances in {attempts} attempts"
    );

    // Residual skip-add: the closing convolution's affine sees the sum
    // and the output ReLU; its gradients are exact through both.
    let mut accepted_r = 0;
    attempts = 0;
    while accepted_r < 10 && attempts < 400 {
        attempts += 1;
        let ch = rng.gen_range(1..=3);
        let in_len = rng.gen_range(7..12);
        let mut block = ResidualBlock::new(ch, 3);
        for conv in [&mut block.conv_a, &mut block.conv_b] {
            for w in &mut conv.weights {
                *w = rng.gen_range(-1.5..1.5);
            }
            for s in &mut conv.scale {
                *s = rng.gen_range(0.3..1.2);
            }
            for s in &mut conv.shift {
                *s = rng.gen_range(-0.5..0.5);
            }
        }
        let x = FeatureMap::from_vec(
            ch,
            in_len,
            (0..ch * in_len).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let cache = block.forward_cached(&x).unwrap();
        if cache
            .pre_relu_sum
            .data
            .iter()
            .chain(cache.a.pre_relu.data.iter())
            .any(|v| v.abs() < 1e-3)
        {
            continue;
        }
        accepted_r += 1;
        let out_elems = cache.pre_relu_sum.data.len();
        let coef: Vec<f64> = (0..out_elems).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out = FeatureMap::from_vec(ch, cache.pre_relu_sum.len, coef.clone()).unwrap();
        let (_, gb, _) = residual_backward(&block, &cache, &d_out);
        for co in 0..ch {
            for (param_grads, pick) in [(&gb.scale, 0usize), (&gb.shift, 1usize)] {
                let keep = if pick == 0 {
                    block.conv_b.scale[co]
                } else {
                    block.conv_b.shift[co]
                };
                let set = |block: &mut ResidualBlock, v: f64| {
                    if pick == 0 {
                        block.conv_b.scale[co] = v;
                    } else {
                        block.conv_b.shift[co] = v;
                    }
                };
                set(&mut block, keep + h);
                let up = residual_objective(&block, &x, &coef);
                set(&mut block, keep - h);
                let down = residual_objective(&block, &x, &coef);
                set(&mut block, keep);
                let fd = (up - down) / (2.0 * h);
                let err = rel(param_grads[co], fd, 1e-3);
                worst = worst.max(err);
                assert!(
                    err <= tol,
                    "criterion 05: FAIL — residual closing affine channel {co}: analytic {} vs FD {fd}",
                    param_grads[co]
                );
            }
        }
    }
    assert!(
        accepted_r == 10,
        "criterion 05: FAIL — only {accepted_r} kink-free residual instances in {attempts} attempts"
    );

    // Loss gradient.
    for _ in 0..50 {
        let n = rng.gen_range(1..6);
        let preds: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let targets: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let idx = rng.gen_range(0..n);
        let side = rng.gen_range(0..2);
        let analytic = 2.0 * (preds[idx][side] - targets[idx][side]) / n as f64;
        let mut up_p = preds.clone();
        up_p[idx][side] += h;
        let mut dn_p = preds.clone();
        dn_p[idx][side] -= h;
        let fd = (mse_loss(&up_p, &targets).unwrap() - mse_loss(&dn_p, &targets).unwrap())
            / (2.0 * h);
        let err = rel(analytic, fd, 1e-3);
        worst = worst.max(err);
        assert!(
            err <= tol,
            "criterion 05: FAIL — loss gradient: analytic {analytic} vs FD {fd}"
        );
    }

    // Adder surrogates: the training direction must agree in sign with
    // the true derivative wherever the score is differentiable.
    let mut checked_pairs = 0;
    while checked_pairs < 1000 {
        let xv: f64 = rng.gen_range(-2.0..2.0);
        let wv: f64 = rng.gen_range(-2.0..2.0);
        if (xv - wv).abs() <= 1e-6 {
            continue;
        }
        checked_pairs += 1;
        let mut conv = AdderConv::new(1, 1, 1, 1, false);
        conv.weights[0] = wv;
        let x = FeatureMap::from_vec(1, 1, vec![xv]).unwrap();
        let cache = conv.forward_cached(&x).unwrap();
        let d_out = FeatureMap::from_vec(1, 1, vec![1.0]).unwrap();
        let (grads, d_in) = conv_backward(&conv, &cache, &d_out);

        // True derivatives of -|x - w|.
        let true_dw = (xv - wv).signum();
        let true_dx = (wv - xv).signum();
        assert!(
            grads.weights[0].signum() == true_dw && grads.weights[0] != 0.0,
            "criterion 05: FAIL — weight surrogate sign at x={xv}, w={wv}"
        );
        assert!(
            d_in.data[0].signum() == true_dx && d_in.data[0] != 0.0,
            "criterion 05: FAIL — input surrogate sign at x={xv}, w={wv}"
        );
    }

    println!("criterion 05: PASS — affine/ReLU/residual-add/loss FD ≤ 1e-5 (worst {worst:.3e}); 1000 surrogate sign agreements");
}

// ---------------------------------------------------------------------
// criterion 06 — overfit a single decay
// ---------------------------------------------------------------------

#[test]
fn criterion_06_single_decay_overfits_quickly() {
    let _g = gate();
    let t0 = Instant::now();
    let cfg = InstrumentConfig::default();
    let params = DecayParams::bi(0.4, 0.5, 2.8, 1500);
    let hist = synthesize_decay(&params, &cfg, 77).unwrap();
    let label = tau_labels(&params);
    let one = TrainSample {
        input: flan_core::net::normalize_input(&hist.counts),
        target: [label.tau_a, label.tau_i],
    };
    let train_set: Vec<TrainSample> = (0..8).map(|_| one.clone()).collect();
    let cfg = TrainConfig {
        max_epochs: 200,
        batch_size: 1,
        learning_rate: 3e-4,
        patience: 200,
        seed: 3,
        ..TrainConfig::default()
    };
    let report = train(Variant::Flan, &train_set, &[], &cfg).unwrap();
    if std::env::var("ACCEPTANCE_DEBUG").is_ok() {
        for e in report.history.iter().step_by(20) {
            eprintln!("epoch {:3}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_loss);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        report.best_val_loss < 1e-3,
        "criterion 06: FAIL — loss {args:.6} after {n} epochs",
        args = report.best_val_loss,
        n = report.history.len()
    );
    assert!(
        secs < 120.0,
        "criterion 06: FAIL — took {secs:.1} s (budget 120 s)"
    );
    println!(
        "criterion 06: PASS — single-decay loss {:.2e} ns² within {} epochs in {secs:.1} s",
        report.best_val_loss,
        report.history.len()
    );
}

// ---------------------------------------------------------------------
// criterion 07 — desk-scale accuracy and training budget
// ---------------------------------------------------------------------

#[test]
fn criterion_07_desk_scale_accuracy() {
    let _g = gate();
    let fix = fixture();
    let labels = test_labels(fix);
    let (fa, fi) = rmse_per_target(&test_predictions(fix, Variant::Flan), &labels);
    let (la, li) = rmse_per_target(&test_predictions(fix, Variant::FlanLs), &labels);
    let secs = fix.train_wall.as_secs_f64();
    for (name, v) in [
        ("flan tau_a", fa),
        ("flan tau_i", fi),
        ("flan-ls tau_a", la),
        ("flan-ls tau_i", li),
    ] {
        assert!(
            v <= 0.3,
            "criterion 07: FAIL — {name} RMSE {v:.4} ns exceeds 0.3 ns"
        );
    }
    assert!(
        secs < 1800.0,
        "criterion 07: FAIL — training took {secs:.0} s (budget 1800 s)"
    );
    println!("criterion 07: PASS — test RMSE flan {fa:.4}/{fi:.4} ns, flan-ls {la:.4}/{li:.4} ns; fixture built in {secs:.0} s");
}

// ---------------------------------------------------------------------
// criterion 08 — image protocol vs curve fitting
// ---------------------------------------------------------------------

#[test]
fn criterion_08_model_beats_curve_fitting_across_regimes() {
    let _g = gate();
    let fix = fixture();

    let img_hi = gen_gt_image(&GtImageSpec::new(64, 64, PhotonRegime::High, 1)).unwrap();
    let truth_hi = img_hi.labels();
    for (i, l) in truth_hi.iter().enumerate() {
        assert!(
            l.tau_i >= l.tau_a - 1e-12,
            "criterion 08: FAIL — ground-truth pixel {i} has tau_i {} < tau_a {}",
            l.tau_i,
            l.tau_a
        );
    }
    let preds = predict_image_float(&fix.flan, &img_hi, None).unwrap();
    let model: MseReport = mse_eval(&preds, &truth_hi, None).unwrap();

    let img_lo = gen_gt_image(&GtImageSpec::new(64, 64, PhotonRegime::Low, 1)).unwrap();
    let truth_lo = img_lo.labels();
    let instrument = InstrumentConfig::default();
    let opts = NlsfOptions {
        components: 2,
        ..NlsfOptions::default()
    };
    let mut fit_preds = Vec::with_capacity(img_lo.pixels.len());
    let mut mask = Vec::with_capacity(img_lo.pixels.len());
    for px in &img_lo.pixels {
        match nlsf_fit(&px.histogram, &instrument, &opts) {
            Ok(fit) => {
                fit_preds.push(fit.lifetimes());
                mask.push(true);
            }
            Err(_) => {
                fit_preds.push(LifetimePair::ZERO);
                mask.push(false);
            }
        }
    }
    let fitted: MseReport = mse_eval(&fit_preds, &truth_lo, Some(&mask)).unwrap();

    assert!(
        model.mse_a < fitted.mse_a && model.mse_i < fitted.mse_i,
        "criterion 08: FAIL — model MSE {:.4}/{:.4} vs fit MSE {:.4}/{:.4} ({} of {} pixels fitted)",
        model.mse_a,
        model.mse_i,
        fitted.mse_a,
        fitted.mse_i,
        fitted.evaluated,
        fit_preds.len()
    );
    println!(
        "criterion 08: PASS — model MSE {:.4}/{:.4} (high counts) below fit MSE {:.4}/{:.4} (low counts, {} of {} pixels fitted); tau_i ≥ tau_a at all 4096 ground-truth pixels",
        model.mse_a, model.mse_i, fitted.mse_a, fitted.mse_i, fitted.evaluated, fit_preds.len()
    );
}

// ---------------------------------------------------------------------
// criterion 09 — quantized inference stays close to float
// ---------------------------------------------------------------------

#[test]
fn criterion_09_quantized_close_to_float() {
    let _g = gate();
    let fix = fixture();
    let labels = test_labels(fix);
    for (name, variant, q) in [
        ("flan", Variant::Flan, &fix.flan_q),
        ("flan-ls", Variant::FlanLs, &fix.flan_ls_q),
    ] {
        let float_preds = test_predictions(fix, variant);
        let mut fixed_preds = Vec::with_capacity(float_preds.len());
        for rec in &fix.test_records {
            let (pair, _) = q.predict(&variant_counts(fix, variant, rec)).unwrap();
            fixed_preds.push(pair);
        }
        let n = float_preds.len() as f64;
        let close_a = float_preds
            .iter()
            .zip(&fixed_preds)
            .filter(|(f, x)| (f.tau_a - x.tau_a).abs() <= 0.05)
            .count() as f64
            / n;
        let close_i = float_preds
            .iter()
            .zip(&fixed_preds)
            .filter(|(f, x)| (f.tau_i - x.tau_i).abs() <= 0.05)
            .count() as f64
            / n;
        let float_mse = mse_eval(&float_preds, &labels, None).unwrap();
        let fixed_mse = mse_eval(&fixed_preds, &labels, None).unwrap();
        assert!(
            close_a >= 0.95 && close_i >= 0.95,
            "criterion 09: FAIL — {name}: only {:.1}%/{:.1}% of pixels within 0.05 ns",
            100.0 * close_a,
            100.0 * close_i
        );
        assert!(
            fixed_mse.mse_a <= 1.2 * float_mse.mse_a && fixed_mse.mse_i <= 1.2 * float_mse.mse_i,
            "criterion 09: FAIL — {name}: quantized MSE {:.4}/{:.4} vs float {:.4}/{:.4} (limit +20%)",
            fixed_mse.mse_a,
            fixed_mse.mse_i,
            float_mse.mse_a,
            float_mse.mse_i
        );
        println!(
            "criterion 09: PASS — {name}: {:.1}%/{:.1}% of pixels within 0.05 ns; MSE {:.4}/{:.4} vs float {:.4}/{:.4}",
            100.0 * close_a, 100.0 * close_i,
            fixed_mse.mse_a, fixed_mse.mse_i, float_mse.mse_a, float_mse.mse_i
        );
    }
}

// ---------------------------------------------------------------------
// criterion 10 — parameter budgets
// ---------------------------------------------------------------------

#[test]
fn criterion_10_parameter_budgets() {
    let _g = gate();
    let full = build_flan(Variant::Flan).param_count();
    let compact = build_flan(Variant::FlanLs).param_count();
    let full_dev = rel(full as f64, 23_003.0, 1.0);
    let compact_dev = rel(compact as f64, 4_058.0, 1.0);
    assert!(
        full_dev <= 0.15,
        "criterion 10: FAIL — full model has {full} parameters, {:.1}% from the 23003 budget",
        100.0 * full_dev
    );
    assert!(
        compact_dev <= 0.20,
        "criterion 10: FAIL — compact model has {compact} parameters, {:.1}% from the 4058 budget",
        100.0 * compact_dev
    );
    println!(
        "criterion 10: PASS — parameter counts {full} ({:+.1}% of 23003) and {compact} ({:+.1}% of 4058)",
        100.0 * (full as f64 / 23_003.0 - 1.0),
        100.0 * (compact as f64 / 4_058.0 - 1.0)
    );
}

// ---------------------------------------------------------------------
// criterion 11 — phasor geometry
// ---------------------------------------------------------------------

#[test]
fn criterion_11_phasor_semicircle() {
    let _g = gate();
    let n = 256;
    let dt = 0.03906;
    let mut worst = 0.0f64;
    for tau in [0.2, 0.3, 0.5, 0.8, 1.2, 1.8, 2.5, 3.2, 4.0] {
        let counts: Vec<u32> = (0..n)
            .map(|i| (5.0e7 * (-(i as f64) * dt / tau).exp()).round() as u32)
            .collect();
        let p = phasor_coords(&Histogram::new(counts, dt), 1).unwrap();
        let dist = (((p.g - 0.5).powi(2) + p.s.powi(2)).sqrt() - 0.5).abs();
        worst = worst.max(dist);
        assert!(
            dist < 0.01,
            "criterion 11: FAIL — tau {tau} ns maps {dist:.4} off the semicircle"
        );
    }
    let uniform = phasor_coords(&Histogram::new(vec![1000; n], dt), 1).unwrap();
    assert!(
        uniform.g.abs() < 1e-9 && uniform.s.abs() < 1e-9,
        "criterion 11: FAIL — uniform histogram maps to ({}, {})",
        uniform.g,
        uniform.s
    );
    println!("criterion 11: PASS — 9 mono decays within 0.01 of the semicircle (worst {worst:.4}); uniform at the origin");
}

// ---------------------------------------------------------------------
// criterion 12 — throughput ordering and bench consistency
// ---------------------------------------------------------------------

#[test]
fn criterion_12_throughput_ordering() {
    let _g = gate();
    let fix = fixture();
    let batch = 512;
    let reps = 7;
    let full_inputs: Vec<Vec<u32>> = fix.test_records[..batch]
        .iter()
        .map(|r| r.histogram.counts.clone())
        .collect();
    let compact_inputs: Vec<Vec<u32>> = fix.test_records[..batch]
        .iter()
        .map(|r| fix.binning.merge(&r.histogram).unwrap().counts)
        .collect();

    // Warm pass, then two independent measurements per variant.
    let _ = bench_network_float(&fix.flan, &full_inputs, batch, 1).unwrap();
    let _ = bench_network_float(&fix.flan_ls, &compact_inputs, batch, 1).unwrap();
    let full = [
        bench_network_float(&fix.flan, &full_inputs, batch, reps).unwrap(),
        bench_network_float(&fix.flan, &full_inputs, batch, reps).unwrap(),
    ];
    let compact = [
        bench_network_float(&fix.flan_ls, &compact_inputs, batch, reps).unwrap(),
        bench_network_float(&fix.flan_ls, &compact_inputs, batch, reps).unwrap(),
    ];
    for rows in [&full, &compact] {
        for r in rows.iter() {
            let implied = r.throughput_pixels_per_ms * r.latency_ms;
            assert!(
                rel(implied, r.batch_size as f64, 1.0) <= 0.05,
                "criterion 12: FAIL — throughput·latency {implied:.1} vs batch {}",
                r.batch_size
            );
        }
        let spread = rel(
            rows[0].throughput_pixels_per_ms,
            rows[1].throughput_pixels_per_ms,
            1e-9,
        );
        assert!(
            spread <= 0.05,
            "criterion 12: FAIL — repeated runs disagree by {:.1}% ({:.2} vs {:.2} px/ms)",
            100.0 * spread,
            rows[0].throughput_pixels_per_ms,
            rows[1].throughput_pixels_per_ms
        );
    }
    let slow = full[0]
        .throughput_pixels_per_ms
        .max(full[1].throughput_pixels_per_ms);
    let fast = compact[0]
        .throughput_pixels_per_ms
        .min(compact[1].throughput_pixels_per_ms);
    assert!(
        fast > slow,
        "criterion 12: FAIL — compact model at {fast:.2} px/ms not above full model at {slow:.2} px/ms"
    );
    println!("criterion 12: PASS — compact {fast:.2} px/ms > full {slow:.2} px/ms; repeats within 5%");
}

// ---------------------------------------------------------------------
// criterion 13 — byte determinism
// ---------------------------------------------------------------------

#[test]
fn criterion_13_pipeline_is_deterministic() -> Result<()> {
    let _g = gate();
    let fix = fixture();

    // Synthesis.
    let spec = DatasetSpec::new(200, 555);
    let bytes_a = io::write_dataset(&gen_dataset(&spec)?)?;
    let bytes_b = io::write_dataset(&gen_dataset(&spec)?)?;
    assert!(
        bytes_a == bytes_b,
        "criterion 13: FAIL — same-seed synthesis bytes differ"
    );

    // Training.
    let records = gen_dataset(&DatasetSpec::new(300, 901))?;
    let samples = prepare_samples(&records, Some(&fix.binning))?;
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 64,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || -> Result<Vec<u8>> {
        let report = train(Variant::FlanLs, &samples, &[], &cfg)?;
        io::write_model(&io::ModelFile {
            network: report.network,
            quant: None,
        })
    };
    assert!(
        run()? == run()?,
        "criterion 13: FAIL — same-seed training bytes differ"
    );

    // Inference, float and fixed.
    for rec in fix.test_records.iter().take(50) {
        let a = fix.flan.predict(&rec.histogram.counts)?;
        let b = fix.flan.predict(&rec.histogram.counts)?;
        assert!(
            a.tau_a.to_bits() == b.tau_a.to_bits() && a.tau_i.to_bits() == b.tau_i.to_bits(),
            "criterion 13: FAIL — float inference not reproducible"
        );
        let (qa, _) = fix.flan_q.predict(&rec.histogram.counts)?;
        let (qb, _) = fix.flan_q.predict(&rec.histogram.counts)?;
        assert!(
            qa.tau_a.to_bits() == qb.tau_a.to_bits() && qa.tau_i.to_bits() == qb.tau_i.to_bits(),
            "criterion 13: FAIL — fixed-point inference not reproducible"
        );
    }

    // Quantization.
    let plane_a = io::write_quant_plane(&quantize_network_default(&fix.flan)?)?;
    let plane_b = io::write_quant_plane(&quantize_network_default(&fix.flan)?)?;
    assert!(
        plane_a == plane_b,
        "criterion 13: FAIL — repeated quantization bytes differ"
    );

    println!("criterion 13: PASS — synthesis, training, inference, and quantization byte-identical across same-seed runs");
    Ok(())
}
