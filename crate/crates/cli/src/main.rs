//! `flan` — lifetime-imaging pipeline driver.
//!
//! Subcommands cover the full workflow: synthesizing labeled decay
//! datasets, log-scale compression, training the adder networks,
//! float and fixed-point inference, quantization, hardware parameter
//! export, classical baselines, image evaluation, and latency
//! benchmarks.
//!
//! Exit codes: 0 success, 2 usage or invalid configuration, 3 missing
//! or malformed data files, 4 numeric failure.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use flan_core::baselines::{cmm_lifetime, nlsf_fit, phasor_coords, phasor_lifetime};
use flan_core::baselines::{CmmOptions, NlsfOptions};
use flan_core::binning::LogBinning;
use flan_core::decay::{
    gen_dataset, DatasetSpec, InstrumentConfig, IrfKernel, LabeledDecay, PhotonRegime,
};
use flan_core::error::Error;
use flan_core::eval::{
    bench_network_float, bench_network_quantized, bench_rows_to_csv, gen_gt_image, mse_eval,
    predict_image_float, predict_image_quantized, GtImage, GtImageSpec,
};
use flan_core::exec;
use flan_core::histogram::LifetimePair;
use flan_core::io::{
    atomic_write, load_dataset, load_model, save_dataset, save_model, write_quant_plane,
    write_text_dataset, ModelFile,
};
use flan_core::net::fixed::quantize_network_with;
use flan_core::net::Variant;
use flan_core::quantize::QFormat;
use flan_core::train::{prepare_samples, train_with_progress, TrainConfig};
use flan_core::Result;

#[derive(Parser)]
#[command(
    name = "flan",
    version,
    about = "Fluorescence-lifetime estimation with multiplication-free adder networks"
)]
struct Cli {
    /// Defaults file with one key=value per line (# starts a comment).
    /// Explicit flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for data-parallel stages (defaults to all cores;
    /// ignored in builds without the parallel feature).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a labeled decay dataset.
    Synth(SynthArgs),
    /// Merge dataset histograms onto a log-scale time axis.
    Compress(CompressArgs),
    /// Train a network variant on a labeled dataset.
    Train(TrainArgs),
    /// Run a trained model over a dataset, float or fixed-point.
    Infer(InferArgs),
    /// Attach a fixed-point parameter plane to a model.
    Quantize(QuantizeArgs),
    /// Export a model's fixed-point plane as a flat hardware image.
    ExportParams(ExportParamsArgs),
    /// Run a classical estimator over a dataset.
    Baseline(BaselineArgs),
    /// Score estimators against a synthetic ground-truth image.
    Eval(EvalArgs),
    /// Measure inference latency and throughput.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Number of records [config: count; default 1000].
    #[arg(long)]
    count: Option<usize>,
    /// RNG seed [config: seed; default 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Peak-count regime high|mid|low [config: regime]; omitted =
    /// training-wide draw of 10..=5000.
    #[arg(long)]
    regime: Option<String>,
    /// Fraction of mono-exponential records [config: mono-fraction;
    /// default 0.5].
    #[arg(long)]
    mono_fraction: Option<f64>,
    /// Uniform background photons per bin [config: background; default 0].
    #[arg(long)]
    background: Option<f64>,
    /// Also dump the records as one CSV line each.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Input dataset path.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Expected input bin count [config: bins-in; default: taken from
    /// the data].
    #[arg(long)]
    bins_in: Option<usize>,
    /// Merged bin count [config: bins-out; default 80].
    #[arg(long)]
    bins_out: Option<usize>,
    /// Edges sidecar path, one original-bin edge per line
    /// [default: <out>.edges.txt].
    #[arg(long)]
    edges: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset path; omitted = validate on the training set.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Network variant: flan (256-bin input) or flan-ls (80 merged bins).
    #[arg(long)]
    variant: String,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    /// Epoch cap [config: epochs; default 500].
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [config: batch-size; default 128].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate [config: lr; default 1e-3].
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience in epochs [config: patience; default 20].
    #[arg(long)]
    patience: Option<usize>,
    /// RNG seed [config: seed; default 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Photon gate stored in the model: histograms with at most this
    /// many total photons return zero without running the network
    /// [config: gate; default 0].
    #[arg(long)]
    gate: Option<u64>,
    /// Write per-epoch losses as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Print an epoch line to stderr every N epochs [default 10; 0 = quiet].
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// Model path.
    #[arg(long)]
    model: PathBuf,
    /// Dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Arithmetic mode float|fixed [config: mode; default float].
    #[arg(long)]
    mode: Option<String>,
    /// Override the model's photon gate for this run.
    #[arg(long)]
    gate: Option<u64>,
    /// Output CSV path; omitted = stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Model path.
    #[arg(long)]
    model: PathBuf,
    /// Output model path (float plane plus fixed-point plane).
    #[arg(long)]
    out: PathBuf,
    /// Feature-map format integer bits [config: fm-int; default 16].
    #[arg(long)]
    fm_int: Option<u32>,
    /// Feature-map format fraction bits [config: fm-frac; default 16].
    #[arg(long)]
    fm_frac: Option<u32>,
    /// Parameter format integer bits [config: param-int; default 10].
    #[arg(long)]
    param_int: Option<u32>,
    /// Parameter format fraction bits [config: param-frac; default 10].
    #[arg(long)]
    param_frac: Option<u32>,
    /// Largest tolerated fraction of clipped parameters [config:
    /// max-clip; default 0.01].
    #[arg(long)]
    max_clip: Option<f64>,
}

#[derive(Args)]
struct ExportParamsArgs {
    /// Model path (must carry a quantized plane).
    #[arg(long)]
    model: PathBuf,
    /// Output parameter-image path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    /// Dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Estimator: cmm | phasor | nlsf.
    #[arg(long)]
    method: String,
    /// Output CSV path; omitted = stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exponential components for nlsf (1 or 2) [config: components;
    /// default 1].
    #[arg(long)]
    components: Option<usize>,
    /// Harmonic for phasor [config: harmonic; default 1].
    #[arg(long)]
    harmonic: Option<u32>,
    /// Instrument-response centroid in bins for cmm [default: computed
    /// from the standard instrument].
    #[arg(long)]
    irf_centroid_bins: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated methods out of cmm,phasor,nlsf,flan,flan-ls.
    #[arg(long)]
    methods: String,
    /// Image width [config: width; default 64].
    #[arg(long)]
    width: Option<usize>,
    /// Image height [config: height; default 64].
    #[arg(long)]
    height: Option<usize>,
    /// Peak-count regime high|mid|low [config: regime; default high].
    #[arg(long)]
    regime: Option<String>,
    /// RNG seed [config: seed; default 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Model for the flan method.
    #[arg(long)]
    model_flan: Option<PathBuf>,
    /// Model for the flan-ls method.
    #[arg(long)]
    model_flan_ls: Option<PathBuf>,
    /// Arithmetic for model methods float|fixed [config: mode;
    /// default float].
    #[arg(long)]
    mode: Option<String>,
    /// Output CSV path; omitted = stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Model path.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated batch sizes [config: batch-sizes; default
    /// 1,4,32,128].
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Timing repetitions per batch size; the median is reported
    /// [config: reps; default 21].
    #[arg(long)]
    reps: Option<usize>,
    /// Arithmetic mode float|fixed [config: mode; default float].
    #[arg(long)]
    mode: Option<String>,
    /// Dataset supplying the benchmark inputs; omitted = synthesized.
    #[arg(long)]
    data: Option<PathBuf>,
    /// RNG seed for synthesized inputs [config: seed; default 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Run batches sequentially even in parallel builds.
    #[arg(long)]
    sequential: bool,
    /// Output CSV path; omitted = stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// key=value defaults loaded from the `--config` file.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "config line {} is not key=value: '{line}'",
                        lineno + 1
                    ))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                Error::InvalidConfig(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
        }
    }
}

/// Flag beats config file beats built-in default.
fn pick<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str, default: T) -> Result<T>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => cfg.get(key)?.unwrap_or(default),
    })
}

fn pick_opt<T: FromStr>(flag: Option<T>, cfg: &FileConfig, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => Some(v),
        None => cfg.get(key)?,
    })
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidParams(_) | Error::ShapeMismatch(_) => 2,
        Error::Format(_) | Error::Io(_) => 3,
        Error::Degenerate(_) | Error::Numeric(_) | Error::Quantize(_) => 4,
    }
}

#[cfg(feature = "parallel")]
fn init_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_workers(_workers: Option<usize>) {}

fn main() {
    let cli = Cli::parse();
    init_workers(cli.workers);
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, &cfg),
        Cmd::Compress(a) => cmd_compress(a, &cfg),
        Cmd::Train(a) => cmd_train(a, &cfg),
        Cmd::Infer(a) => cmd_infer(a, &cfg),
        Cmd::Quantize(a) => cmd_quantize(a, &cfg),
        Cmd::ExportParams(a) => cmd_export_params(a),
        Cmd::Baseline(a) => cmd_baseline(a, &cfg),
        Cmd::Eval(a) => cmd_eval(a, &cfg),
        Cmd::Bench(a) => cmd_bench(a, &cfg),
    }
}

/// Write to a file atomically, or to stdout when no path is given.
fn emit(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => atomic_write(p, content.as_bytes()),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_synth(a: SynthArgs, cfg: &FileConfig) -> Result<()> {
    let count = pick(a.count, cfg, "count", 1000)?;
    let seed = pick(a.seed, cfg, "seed", 1)?;
    let regime = pick_opt(a.regime, cfg, "regime")?;
    let mono_fraction = pick(a.mono_fraction, cfg, "mono-fraction", 0.5)?;
    let background = pick(a.background, cfg, "background", 0.0)?;

    let mut spec = match regime {
        Some(r) => DatasetSpec::with_regime(count, seed, r.parse::<PhotonRegime>()?),
        None => DatasetSpec::new(count, seed),
    };
    spec.mono_fraction = mono_fraction;
    spec.background = background;

    let records = gen_dataset(&spec)?;
    save_dataset(&a.out, &records)?;
    if let Some(text) = &a.text {
        atomic_write(text, write_text_dataset(&records).as_bytes())?;
    }
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_compress(a: CompressArgs, cfg: &FileConfig) -> Result<()> {
    let bins_out = pick(a.bins_out, cfg, "bins-out", 80)?;
    let records = load_dataset(&a.input)?;
    let data_bins = records
        .first()
        .map(|r| r.histogram.len())
        .ok_or_else(|| Error::Format("dataset holds no records".into()))?;
    let bins_in = pick(a.bins_in, cfg, "bins-in", data_bins)?;
    if bins_in != data_bins {
        return Err(Error::ShapeMismatch(format!(
            "data has {data_bins} bins, --bins-in says {bins_in}"
        )));
    }

    let binning = LogBinning::new(bins_in, bins_out)?;
    let merged = records
        .iter()
        .map(|rec| {
            Ok(LabeledDecay {
                histogram: binning.merge(&rec.histogram)?,
                label: rec.label,
                params: rec.params.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    save_dataset(&a.out, &merged)?;

    let edges_path = a.edges.unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_os_string();
        p.push(".edges.txt");
        PathBuf::from(p)
    });
    let mut edges_text = String::new();
    for e in binning.edges() {
        edges_text.push_str(&format!("{e}\n"));
    }
    atomic_write(&edges_path, edges_text.as_bytes())?;

    println!(
        "merged {} records {}->{} bins (ratio {:.6}); edges in {}",
        merged.len(),
        bins_in,
        bins_out,
        binning.ratio(),
        edges_path.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, cfg: &FileConfig) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let train_cfg = TrainConfig {
        max_epochs: pick(a.epochs, cfg, "epochs", 500)?,
        batch_size: pick(a.batch_size, cfg, "batch-size", 128)?,
        learning_rate: pick(a.lr, cfg, "lr", 1e-3)?,
        patience: pick(a.patience, cfg, "patience", 20)?,
        seed: pick(a.seed, cfg, "seed", 1)?,
        ..TrainConfig::default()
    };
    let gate = pick(a.gate, cfg, "gate", 0)?;
    let log_every = pick(a.log_every, cfg, "log-every", 10)?;

    let train_records = load_dataset(&a.data)?;
    let train_set = prepare_samples(&train_records, None)?;
    let val_set = match &a.val {
        Some(path) => prepare_samples(&load_dataset(path)?, None)?,
        None => Vec::new(),
    };

    let report = train_with_progress(variant, &train_set, &val_set, &train_cfg, |s| {
        if log_every > 0 && (s.epoch % log_every == 0 || s.epoch + 1 == train_cfg.max_epochs) {
            eprintln!(
                "epoch {:4}  train {:.6}  val {:.6}",
                s.epoch, s.train_loss, s.val_loss
            );
        }
    })?;

    let mut network = report.network.clone();
    network.gate = gate;
    save_model(&a.out, &ModelFile {
        network,
        quant: None,
    })?;

    if let Some(history) = &a.history {
        let mut csv = String::from("epoch,train_loss,val_loss\n");
        for s in &report.history {
            csv.push_str(&format!("{},{:.9},{:.9}\n", s.epoch, s.train_loss, s.val_loss));
        }
        atomic_write(history, csv.as_bytes())?;
    }

    println!(
        "trained {} for {} epochs; best epoch {} (val loss {:.6}); saved to {}",
        variant.name(),
        report.history.len(),
        report.best_epoch,
        report.best_val_loss,
        a.out.display()
    );
    Ok(())
}

fn parse_mode(mode: &str) -> Result<bool> {
    match mode {
        "float" => Ok(false),
        "fixed" => Ok(true),
        other => Err(Error::InvalidConfig(format!(
            "unknown mode '{other}' (expected float|fixed)"
        ))),
    }
}

/// The quantized plane of a loaded model, or a data-format error
/// directing the user to `quantize`.
fn require_quant(m: &ModelFile) -> Result<&flan_core::net::fixed::QuantizedNetwork> {
    m.quant.as_ref().ok_or_else(|| {
        Error::Format("model carries no fixed-point plane; run `flan quantize` first".into())
    })
}

fn cmd_infer(a: InferArgs, cfg: &FileConfig) -> Result<()> {
    let fixed = parse_mode(&pick(a.mode, cfg, "mode", "float".into())?)?;
    let model = load_model(&a.model)?;
    let records = load_dataset(&a.data)?;

    let mut csv = String::from("index,tau_a,tau_i\n");
    if fixed {
        let mut q = require_quant(&model)?.clone();
        if let Some(g) = a.gate {
            q.gate = g;
        }
        let results = exec::map_slice(&records, |r| q.predict(&r.histogram.counts));
        let mut sat = flan_core::quantize::SaturationCounter::default();
        for (i, r) in results.into_iter().enumerate() {
            let (pair, s) = r?;
            sat.merge(&s);
            csv.push_str(&format!("{i},{:.6},{:.6}\n", pair.tau_a, pair.tau_i));
        }
        eprintln!(
            "fixed-point saturations: {}/{} values ({:.4}%)",
            sat.clipped,
            sat.total,
            100.0 * sat.fraction()
        );
    } else {
        let mut net = model.network.clone();
        if let Some(g) = a.gate {
            net.gate = g;
        }
        let results = exec::map_slice(&records, |r| net.predict(&r.histogram.counts));
        for (i, r) in results.into_iter().enumerate() {
            let pair = r?;
            csv.push_str(&format!("{i},{:.6},{:.6}\n", pair.tau_a, pair.tau_i));
        }
    }
    emit(a.out.as_deref(), &csv)
}

fn cmd_quantize(a: QuantizeArgs, cfg: &FileConfig) -> Result<()> {
    let fm = QFormat::new(
        pick(a.fm_int, cfg, "fm-int", 16)?,
        pick(a.fm_frac, cfg, "fm-frac", 16)?,
    )?;
    let param = QFormat::new(
        pick(a.param_int, cfg, "param-int", 10)?,
        pick(a.param_frac, cfg, "param-frac", 10)?,
    )?;
    let max_clip = pick(a.max_clip, cfg, "max-clip", 0.01)?;

    let model = load_model(&a.model)?;
    let quant = quantize_network_with(&model.network, fm, param, max_clip)?;
    let sat = quant.param_saturation;
    save_model(&a.out, &ModelFile {
        network: model.network,
        quant: Some(quant),
    })?;
    println!(
        "quantized (feature maps {fm}, parameters {param}): {}/{} parameters clipped ({:.4}%); saved to {}",
        sat.clipped,
        sat.total,
        100.0 * sat.fraction(),
        a.out.display()
    );
    Ok(())
}

fn cmd_export_params(a: ExportParamsArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let quant = require_quant(&model)?;
    let bytes = write_quant_plane(quant)?;
    atomic_write(&a.out, &bytes)?;
    println!(
        "exported {} parameter words ({} bytes) to {}",
        quant.params_to_raw().len(),
        bytes.len(),
        a.out.display()
    );
    Ok(())
}

fn default_irf_centroid() -> Result<f64> {
    Ok(IrfKernel::new(&InstrumentConfig::default())?.centroid_bins())
}

fn cmd_baseline(a: BaselineArgs, cfg: &FileConfig) -> Result<()> {
    let records = load_dataset(&a.data)?;
    let csv = match a.method.as_str() {
        "cmm" => {
            let centroid = match a.irf_centroid_bins {
                Some(v) => v,
                None => default_irf_centroid()?,
            };
            let opts = CmmOptions {
                window: None,
                irf_centroid_bins: centroid,
            };
            let mut csv = String::from("index,tau_ns\n");
            let rows = exec::map_slice(&records, |r| cmm_lifetime(&r.histogram, &opts));
            for (i, r) in rows.into_iter().enumerate() {
                match r {
                    Ok(tau) => csv.push_str(&format!("{i},{tau:.6}\n")),
                    Err(_) => csv.push_str(&format!("{i},nan\n")),
                }
            }
            csv
        }
        "phasor" => {
            let harmonic = pick(a.harmonic, cfg, "harmonic", 1)?;
            let mut csv = String::from("index,g,s,tau_ns\n");
            let rows = exec::map_slice(&records, |r| phasor_coords(&r.histogram, harmonic));
            for (i, (r, rec)) in rows.into_iter().zip(&records).enumerate() {
                match r {
                    Ok(p) => {
                        let omega = harmonic as f64
                            * flan_core::baselines::fundamental_omega(&rec.histogram);
                        let tau = phasor_lifetime(&p, omega)
                            .map(|t| format!("{t:.6}"))
                            .unwrap_or_else(|_| "nan".into());
                        csv.push_str(&format!("{i},{:.6},{:.6},{tau}\n", p.g, p.s));
                    }
                    Err(_) => csv.push_str(&format!("{i},nan,nan,nan\n")),
                }
            }
            csv
        }
        "nlsf" => {
            let components = pick(a.components, cfg, "components", 1)?;
            let instrument = InstrumentConfig::default();
            let opts = NlsfOptions {
                components,
                ..NlsfOptions::default()
            };
            let mut csv = String::from("index,tau_a,tau_i,converged,iterations\n");
            let rows = exec::map_slice(&records, |r| nlsf_fit(&r.histogram, &instrument, &opts));
            for (i, r) in rows.into_iter().enumerate() {
                match r {
                    Ok(fit) => {
                        let pair = fit.lifetimes();
                        csv.push_str(&format!(
                            "{i},{:.6},{:.6},{},{}\n",
                            pair.tau_a, pair.tau_i, fit.converged, fit.iterations
                        ));
                    }
                    Err(_) => csv.push_str(&format!("{i},nan,nan,false,0\n")),
                }
            }
            csv
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected cmm|phasor|nlsf)"
            )))
        }
    };
    emit(a.out.as_deref(), &csv)
}

/// Per-pixel predictions of one estimator over an image, with a mask of
/// pixels the estimator could not score.
fn estimate_image(
    method: &str,
    image: &GtImage,
    models: &EvalModels,
    fixed: bool,
) -> Result<(Vec<LifetimePair>, Vec<bool>)> {
    let n = image.pixels.len();
    match method {
        "cmm" => {
            let opts = CmmOptions {
                window: None,
                irf_centroid_bins: default_irf_centroid()?,
            };
            let rows = exec::map_slice(&image.pixels, |px| cmm_lifetime(&px.histogram, &opts));
            let mut preds = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n);
            for r in rows {
                match r {
                    Ok(tau) => {
                        preds.push(LifetimePair::new(tau, tau));
                        mask.push(true);
                    }
                    Err(_) => {
                        preds.push(LifetimePair::ZERO);
                        mask.push(false);
                    }
                }
            }
            Ok((preds, mask))
        }
        "phasor" => {
            let rows = exec::map_slice(&image.pixels, |px| {
                let p = phasor_coords(&px.histogram, 1)?;
                let omega = flan_core::baselines::fundamental_omega(&px.histogram);
                phasor_lifetime(&p, omega)
            });
            let mut preds = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n);
            for r in rows {
                match r {
                    Ok(tau) => {
                        preds.push(LifetimePair::new(tau, tau));
                        mask.push(true);
                    }
                    Err(_) => {
                        preds.push(LifetimePair::ZERO);
                        mask.push(false);
                    }
                }
            }
            Ok((preds, mask))
        }
        "nlsf" => {
            let instrument = InstrumentConfig::default();
            let opts = NlsfOptions {
                components: 2,
                ..NlsfOptions::default()
            };
            let rows =
                exec::map_slice(&image.pixels, |px| nlsf_fit(&px.histogram, &instrument, &opts));
            let mut preds = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n);
            for r in rows {
                match r {
                    Ok(fit) => {
                        preds.push(fit.lifetimes());
                        mask.push(true);
                    }
                    Err(_) => {
                        preds.push(LifetimePair::ZERO);
                        mask.push(false);
                    }
                }
            }
            Ok((preds, mask))
        }
        "flan" | "flan-ls" => {
            let (model, binning) = if method == "flan" {
                (models.flan.as_ref(), None)
            } else {
                (models.flan_ls.as_ref(), Some(&models.binning))
            };
            let model = model.ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "method '{method}' needs --model-{method} pointing at a trained model"
                ))
            })?;
            let preds = if fixed {
                let q = require_quant(model)?;
                let (preds, sat) = predict_image_quantized(q, image, binning)?;
                eprintln!(
                    "{method} fixed-point saturations: {}/{} ({:.4}%)",
                    sat.clipped,
                    sat.total,
                    100.0 * sat.fraction()
                );
                preds
            } else {
                predict_image_float(&model.network, image, binning)?
            };
            let mask = vec![true; n];
            Ok((preds, mask))
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown method '{other}' (expected cmm|phasor|nlsf|flan|flan-ls)"
        ))),
    }
}

struct EvalModels {
    flan: Option<ModelFile>,
    flan_ls: Option<ModelFile>,
    binning: LogBinning,
}

fn cmd_eval(a: EvalArgs, cfg: &FileConfig) -> Result<()> {
    let width = pick(a.width, cfg, "width", 64)?;
    let height = pick(a.height, cfg, "height", 64)?;
    let regime: PhotonRegime = pick(a.regime, cfg, "regime", "high".into())?.parse()?;
    let seed = pick(a.seed, cfg, "seed", 1)?;
    let fixed = parse_mode(&pick(a.mode, cfg, "mode", "float".into())?)?;

    let spec = GtImageSpec::new(width, height, regime, seed);
    let image = gen_gt_image(&spec)?;
    let truth = image.labels();

    let models = EvalModels {
        flan: a.model_flan.as_deref().map(load_model).transpose()?,
        flan_ls: a.model_flan_ls.as_deref().map(load_model).transpose()?,
        binning: LogBinning::new(spec.instrument.num_bins, 80)?,
    };

    let mut csv = String::from("method,mse_a,mse_i,evaluated,skipped\n");
    for method in a.methods.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let (preds, mask) = estimate_image(method, &image, &models, fixed)?;
        let report = mse_eval(&preds, &truth, Some(&mask))?;
        csv.push_str(&format!(
            "{method},{:.9},{:.9},{},{}\n",
            report.mse_a, report.mse_i, report.evaluated, report.skipped
        ));
    }
    emit(a.out.as_deref(), &csv)
}

fn cmd_bench(a: BenchArgs, cfg: &FileConfig) -> Result<()> {
    let batch_spec = pick(a.batch_sizes, cfg, "batch-sizes", "1,4,32,128".into())?;
    let reps = pick(a.reps, cfg, "reps", 21)?;
    let fixed = parse_mode(&pick(a.mode, cfg, "mode", "float".into())?)?;
    let seed = pick(a.seed, cfg, "seed", 1)?;

    let batch_sizes = batch_spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>().map_err(|_| {
                Error::InvalidConfig(format!("batch size '{s}' is not a positive integer"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if batch_sizes.is_empty() {
        return Err(Error::InvalidConfig("no batch sizes given".into()));
    }
    let largest = *batch_sizes.iter().max().unwrap();

    let model = load_model(&a.model)?;
    let input_len = model.network.input_len();

    let records = match &a.data {
        Some(path) => load_dataset(path)?,
        None => {
            // Synthesize full-resolution decays, merging when the model
            // expects the compressed axis.
            let spec = DatasetSpec::with_regime(largest, seed, PhotonRegime::High);
            let full = gen_dataset(&spec)?;
            if input_len == spec.instrument.num_bins {
                full
            } else {
                let binning = LogBinning::new(spec.instrument.num_bins, input_len)?;
                full.into_iter()
                    .map(|rec| {
                        Ok(LabeledDecay {
                            histogram: binning.merge(&rec.histogram)?,
                            label: rec.label,
                            params: rec.params,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        }
    };
    let inputs: Vec<Vec<u32>> = records
        .iter()
        .map(|r| r.histogram.counts.clone())
        .collect();

    if a.sequential {
        // Pin the batch map to one in-process worker by timing the
        // sequential executor through the generic harness.
        let mut rows = Vec::new();
        for &bs in &batch_sizes {
            if inputs.len() < bs {
                return Err(Error::InvalidConfig(format!(
                    "benchmark needs {bs} inputs, got {}",
                    inputs.len()
                )));
            }
            let batch = &inputs[..bs];
            let row = if fixed {
                let q = require_quant(&model)?;
                flan_core::eval::bench_batch(
                    || {
                        exec::map_slice_seq(batch, |c| q.predict(c))
                            .into_iter()
                            .collect::<Result<Vec<_>>>()
                            .map(|_| ())
                    },
                    bs,
                    reps,
                )?
            } else {
                flan_core::eval::bench_batch(
                    || {
                        exec::map_slice_seq(batch, |c| model.network.predict(c))
                            .into_iter()
                            .collect::<Result<Vec<_>>>()
                            .map(|_| ())
                    },
                    bs,
                    reps,
                )?
            };
            rows.push(flan_core::eval::BenchRow { workers: 1, ..row });
        }
        return emit(a.out.as_deref(), &bench_rows_to_csv(&rows));
    }

    let mut rows = Vec::new();
    for &bs in &batch_sizes {
        let row = if fixed {
            bench_network_quantized(require_quant(&model)?, &inputs, bs, reps)?
        } else {
            bench_network_float(&model.network, &inputs, bs, reps)?
        };
        rows.push(row);
    }
    emit(a.out.as_deref(), &bench_rows_to_csv(&rows))
}
