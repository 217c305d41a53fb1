//! Binary container formats and atomic file writes.
//!
//! Three little-endian formats, each opening with a 4-byte magic and a
//! u16 version; readers reject unknown magics and versions outright.
//!
//! * `FLDS` — labeled decay datasets: a fixed header (bin count, bin
//!   width in integer picoseconds, record count, label format), then
//!   per record the counts as u16 words, the two lifetime labels as
//!   binary32, and the generating component list as (fraction,
//!   lifetime) binary32 pairs.
//! * `FLNM` — network models: variant tag, photon gate, an
//!   architecture descriptor (layer kinds/shapes/strides), the float
//!   parameters as binary32 in serialization order, and optionally an
//!   embedded quantized plane.
//! * `FLNP` — quantized parameter planes: per layer a shape record plus
//!   its fixed-point format, then weight/scale/shift words stored as
//!   signed little-endian integers of the minimal byte width covering
//!   the format (3 bytes for Q10.10, 4 for Q16.16).
//!
//! All file writes go through a temp-file-and-rename so a crash never
//! leaves a partial file at the target path.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::decay::{DecayComponent, DecayParams, LabeledDecay};
use crate::error::{Error, Result};
use crate::histogram::{Histogram, LifetimePair};
use crate::net::fixed::{quantize_network_with, FixedLayer, QuantizedNetwork};
use crate::net::{AdderConv, AdderDense, Layer, Network, ResidualBlock, Variant};
use crate::quantize::QFormat;

pub const FLDS_MAGIC: &[u8; 4] = b"FLDS";
pub const FLNM_MAGIC: &[u8; 4] = b"FLNM";
pub const FLNP_MAGIC: &[u8; 4] = b"FLNP";
pub const FLDS_VERSION: u16 = 1;
pub const FLNM_VERSION: u16 = 1;
pub const FLNP_VERSION: u16 = 1;

/// The one dataset label layout this crate writes: a lifetime pair plus
/// the generating component list.
const LABEL_FORMAT_PAIR_COMPONENTS: u8 = 1;

/// Write bytes to `path` atomically: a temp file beside the target is
/// written, flushed, and renamed into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParams(format!("path {path:?} has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp_path = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    std::fs::write(&tmp_path, bytes)?;
    match std::fs::rename(&tmp_path, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp_path);
            Err(e.into())
        }
    }
}

fn check_magic(cur: &mut Cursor<&[u8]>, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    cur.read_exact(&mut got)
        .map_err(|_| Error::Format(format!("truncated {what} header")))?;
    if &got != magic {
        return Err(Error::Format(format!(
            "not a {what} file (magic {:?})",
            String::from_utf8_lossy(&got)
        )));
    }
    Ok(())
}

fn check_version(cur: &mut Cursor<&[u8]>, expect: u16, what: &str) -> Result<()> {
    let got = cur
        .read_u16::<LE>()
        .map_err(|_| Error::Format(format!("truncated {what} header")))?;
    if got != expect {
        return Err(Error::Format(format!(
            "unsupported {what} version {got} (this build reads {expect})"
        )));
    }
    Ok(())
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("truncated {what}"))
}

// ---------------------------------------------------------------------------
// FLDS datasets
// ---------------------------------------------------------------------------

/// Serialize a labeled dataset. All histograms must share one length
/// and bin width; counts must fit u16.
pub fn write_dataset(records: &[LabeledDecay]) -> Result<Vec<u8>> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidParams("refusing to write an empty dataset".into()))?;
    let num_bins = first.histogram.counts.len();
    if num_bins == 0 || num_bins > u16::MAX as usize {
        return Err(Error::InvalidParams(format!(
            "dataset bin count {num_bins} outside u16 range"
        )));
    }
    let bin_width_ps = (first.histogram.bin_width_ns * 1000.0).round();
    if !(bin_width_ps >= 1.0 && bin_width_ps <= u32::MAX as f64) {
        return Err(Error::InvalidParams(format!(
            "bin width {} ns does not map to a positive integer picosecond count",
            first.histogram.bin_width_ns
        )));
    }
    let bin_width_ps = bin_width_ps as u32;
    if records.len() > u32::MAX as usize {
        return Err(Error::InvalidParams("too many records for the container".into()));
    }

    let mut buf = Vec::with_capacity(16 + records.len() * (2 * num_bins + 16));
    buf.extend_from_slice(FLDS_MAGIC);
    buf.write_u16::<LE>(FLDS_VERSION)?;
    buf.write_u16::<LE>(num_bins as u16)?;
    buf.write_u32::<LE>(bin_width_ps)?;
    buf.write_u32::<LE>(records.len() as u32)?;
    buf.write_u8(LABEL_FORMAT_PAIR_COMPONENTS)?;

    for (i, rec) in records.iter().enumerate() {
        if rec.histogram.counts.len() != num_bins {
            return Err(Error::ShapeMismatch(format!(
                "record {i} has {} bins, dataset header says {num_bins}",
                rec.histogram.counts.len()
            )));
        }
        for &c in &rec.histogram.counts {
            if c > u16::MAX as u32 {
                return Err(Error::Format(format!(
                    "record {i} holds a bin count of {c}, above the container's u16 limit"
                )));
            }
            buf.write_u16::<LE>(c as u16)?;
        }
        buf.write_f32::<LE>(rec.label.tau_a as f32)?;
        buf.write_f32::<LE>(rec.label.tau_i as f32)?;
        let comps = &rec.params.components;
        if comps.len() > u8::MAX as usize {
            return Err(Error::InvalidParams(format!(
                "record {i} has {} components, above the container's u8 limit",
                comps.len()
            )));
        }
        buf.write_u8(comps.len() as u8)?;
        for comp in comps {
            buf.write_f32::<LE>(comp.fraction as f32)?;
            buf.write_f32::<LE>(comp.lifetime_ns as f32)?;
        }
    }
    Ok(buf)
}

/// Parse a labeled dataset; the inverse of [`write_dataset`] up to the
/// container's u16/binary32 precision.
pub fn read_dataset(bytes: &[u8]) -> Result<Vec<LabeledDecay>> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, FLDS_MAGIC, "dataset")?;
    check_version(&mut cur, FLDS_VERSION, "dataset")?;
    let num_bins = cur.read_u16::<LE>().map_err(|_| truncated("dataset header"))? as usize;
    let bin_width_ps = cur.read_u32::<LE>().map_err(|_| truncated("dataset header"))?;
    let record_count = cur.read_u32::<LE>().map_err(|_| truncated("dataset header"))? as usize;
    let label_format = cur.read_u8().map_err(|_| truncated("dataset header"))?;
    if label_format != LABEL_FORMAT_PAIR_COMPONENTS {
        return Err(Error::Format(format!(
            "unsupported dataset label format {label_format}"
        )));
    }
    if num_bins == 0 {
        return Err(Error::Format("dataset header declares zero bins".into()));
    }
    let bin_width_ns = bin_width_ps as f64 / 1000.0;

    let mut records = Vec::with_capacity(record_count);
    for i in 0..record_count {
        let mut counts = Vec::with_capacity(num_bins);
        for _ in 0..num_bins {
            counts.push(
                cur.read_u16::<LE>()
                    .map_err(|_| truncated(&format!("record {i} counts")))? as u32,
            );
        }
        let tau_a = cur
            .read_f32::<LE>()
            .map_err(|_| truncated(&format!("record {i} labels")))? as f64;
        let tau_i = cur
            .read_f32::<LE>()
            .map_err(|_| truncated(&format!("record {i} labels")))? as f64;
        let n_comp = cur
            .read_u8()
            .map_err(|_| truncated(&format!("record {i} labels")))? as usize;
        let mut components = Vec::with_capacity(n_comp);
        for _ in 0..n_comp {
            let fraction = cur
                .read_f32::<LE>()
                .map_err(|_| truncated(&format!("record {i} components")))? as f64;
            let lifetime_ns = cur
                .read_f32::<LE>()
                .map_err(|_| truncated(&format!("record {i} components")))? as f64;
            components.push(DecayComponent {
                fraction,
                lifetime_ns,
            });
        }
        // Peak count is not stored; recover it from the curve itself.
        let peak_count = counts.iter().copied().max().unwrap_or(0).max(1);
        records.push(LabeledDecay {
            histogram: Histogram::new(counts, bin_width_ns),
            label: LifetimePair { tau_a, tau_i },
            params: DecayParams {
                components,
                peak_count,
            },
        });
    }
    if cur.position() != bytes.len() as u64 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last dataset record",
            bytes.len() as u64 - cur.position()
        )));
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[LabeledDecay]) -> Result<()> {
    atomic_write(path, &write_dataset(records)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledDecay>> {
    read_dataset(&std::fs::read(path)?)
}

/// Human-readable dataset dump: one record per line, counts CSV first,
/// then tau_a, tau_i, the component count, and (fraction, lifetime)
/// pairs.
pub fn write_text_dataset(records: &[LabeledDecay]) -> String {
    let mut out = String::new();
    for rec in records {
        let mut first = true;
        for &c in &rec.histogram.counts {
            if !first {
                out.push(',');
            }
            out.push_str(&c.to_string());
            first = false;
        }
        out.push_str(&format!(",{:.6},{:.6}", rec.label.tau_a, rec.label.tau_i));
        out.push_str(&format!(",{}", rec.params.components.len()));
        for comp in &rec.params.components {
            out.push_str(&format!(",{:.6},{:.6}", comp.fraction, comp.lifetime_ns));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Layer descriptors (shared by FLNM and FLNP)
// ---------------------------------------------------------------------------

/// Flat layer-record kinds. Residual blocks serialize as their two
/// convolutions, tagged so readers can reassemble the block.
const KIND_CONV_RELU: u8 = 0;
const KIND_CONV_PLAIN: u8 = 1;
const KIND_RES_A: u8 = 2;
const KIND_RES_B: u8 = 3;
const KIND_DENSE_RELU: u8 = 4;
const KIND_DENSE_PLAIN: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerDesc {
    kind: u8,
    ch_in: u16,
    ch_out: u16,
    kernel: u8,
    stride: u8,
}

fn conv_desc(c: &AdderConv, kind: u8) -> Result<LayerDesc> {
    let field = |v: usize, name: &str, max: usize| -> Result<usize> {
        if v == 0 || v > max {
            return Err(Error::InvalidParams(format!(
                "layer {name} {v} outside the serializable range 1..={max}"
            )));
        }
        Ok(v)
    };
    Ok(LayerDesc {
        kind,
        ch_in: field(c.in_ch, "input channels", u16::MAX as usize)? as u16,
        ch_out: field(c.out_ch, "output channels", u16::MAX as usize)? as u16,
        kernel: field(c.kernel, "kernel", u8::MAX as usize)? as u8,
        stride: field(c.stride, "stride", u8::MAX as usize)? as u8,
    })
}

fn dense_desc(d: &AdderDense) -> Result<LayerDesc> {
    if d.in_features == 0 || d.in_features > u16::MAX as usize || d.out_features == 0
        || d.out_features > u16::MAX as usize
    {
        return Err(Error::InvalidParams(
            "dense feature counts outside the serializable range".into(),
        ));
    }
    Ok(LayerDesc {
        kind: if d.relu { KIND_DENSE_RELU } else { KIND_DENSE_PLAIN },
        ch_in: d.in_features as u16,
        ch_out: d.out_features as u16,
        kernel: 1,
        stride: 1,
    })
}

fn write_desc(buf: &mut Vec<u8>, d: &LayerDesc) -> Result<()> {
    buf.write_u8(d.kind)?;
    buf.write_u16::<LE>(d.ch_in)?;
    buf.write_u16::<LE>(d.ch_out)?;
    buf.write_u8(d.kernel)?;
    buf.write_u8(d.stride)?;
    Ok(())
}

fn read_desc(cur: &mut Cursor<&[u8]>) -> Result<LayerDesc> {
    Ok(LayerDesc {
        kind: cur.read_u8().map_err(|_| truncated("layer descriptor"))?,
        ch_in: cur.read_u16::<LE>().map_err(|_| truncated("layer descriptor"))?,
        ch_out: cur.read_u16::<LE>().map_err(|_| truncated("layer descriptor"))?,
        kernel: cur.read_u8().map_err(|_| truncated("layer descriptor"))?,
        stride: cur.read_u8().map_err(|_| truncated("layer descriptor"))?,
    })
}

fn backbone_descs(backbone: &[Layer]) -> Result<Vec<LayerDesc>> {
    let mut out = Vec::new();
    for layer in backbone {
        match layer {
            Layer::Conv(c) => out.push(conv_desc(
                c,
                if c.relu { KIND_CONV_RELU } else { KIND_CONV_PLAIN },
            )?),
            Layer::Residual(r) => {
                out.push(conv_desc(&r.conv_a, KIND_RES_A)?);
                out.push(conv_desc(&r.conv_b, KIND_RES_B)?);
            }
        }
    }
    Ok(out)
}

fn rebuild_backbone(descs: &[LayerDesc]) -> Result<Vec<Layer>> {
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < descs.len() {
        let d = descs[i];
        match d.kind {
            KIND_CONV_RELU | KIND_CONV_PLAIN => {
                out.push(Layer::Conv(AdderConv::new(
                    d.ch_in as usize,
                    d.ch_out as usize,
                    d.kernel as usize,
                    d.stride as usize,
                    d.kind == KIND_CONV_RELU,
                )));
                i += 1;
            }
            KIND_RES_A => {
                let b = *descs.get(i + 1).ok_or_else(|| {
                    Error::Format("residual first-half record without a second half".into())
                })?;
                if b.kind != KIND_RES_B {
                    return Err(Error::Format(
                        "residual first-half record not followed by its second half".into(),
                    ));
                }
                if d.ch_in != d.ch_out || b.ch_in != b.ch_out || d.ch_in != b.ch_in {
                    return Err(Error::Format(
                        "residual block records must preserve one channel count".into(),
                    ));
                }
                if d.stride != 1 || b.stride != 1 {
                    return Err(Error::Format("residual block records must be stride 1".into()));
                }
                let mut block = ResidualBlock::new(d.ch_in as usize, d.kernel as usize);
                if b.kernel != d.kernel {
                    block.conv_b =
                        AdderConv::new(b.ch_in as usize, b.ch_out as usize, b.kernel as usize, 1, false);
                }
                out.push(Layer::Residual(block));
                i += 2;
            }
            other => {
                return Err(Error::Format(format!(
                    "unexpected layer kind {other} in a backbone descriptor"
                )))
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// FLNP quantized planes
// ---------------------------------------------------------------------------

fn word_width(fmt: QFormat) -> usize {
    ((fmt.total_bits() + 7) / 8) as usize
}

fn write_word(buf: &mut Vec<u8>, v: i64, width: usize) {
    for i in 0..width {
        buf.push((v >> (8 * i)) as u8);
    }
}

fn read_word(cur: &mut Cursor<&[u8]>, width: usize) -> Result<i64> {
    let mut raw: u64 = 0;
    for i in 0..width {
        let b = cur.read_u8().map_err(|_| truncated("parameter words"))?;
        raw |= (b as u64) << (8 * i);
    }
    let unused = 64 - 8 * width as u32;
    Ok(((raw << unused) as i64) >> unused)
}

struct FixedTensorRef<'a> {
    desc: LayerDesc,
    weights: &'a [i64],
    scale: &'a [i64],
    shift: &'a [i64],
}

fn conv_ref(c: &crate::net::fixed::FixedConv, kind: u8) -> Result<FixedTensorRef<'_>> {
    let shadow = AdderConv::new(c.in_ch, c.out_ch, c.kernel, c.stride, c.relu);
    Ok(FixedTensorRef {
        desc: conv_desc(&shadow, kind)?,
        weights: &c.weights_raw,
        scale: &c.scale_raw,
        shift: &c.shift_raw,
    })
}

fn fixed_layer_refs(q: &QuantizedNetwork) -> Result<Vec<FixedTensorRef<'_>>> {
    let mut out = Vec::new();
    for layer in &q.backbone {
        match layer {
            FixedLayer::Conv(c) => out.push(conv_ref(
                c,
                if c.relu { KIND_CONV_RELU } else { KIND_CONV_PLAIN },
            )?),
            FixedLayer::Residual(a, b) => {
                out.push(conv_ref(a, KIND_RES_A)?);
                out.push(conv_ref(b, KIND_RES_B)?);
            }
        }
    }
    for head in [&q.head_a, &q.head_i] {
        for d in head.iter() {
            let shadow = AdderDense::new(d.in_features, d.out_features, d.relu);
            out.push(FixedTensorRef {
                desc: dense_desc(&shadow)?,
                weights: &d.weights_raw,
                scale: &d.scale_raw,
                shift: &d.shift_raw,
            });
        }
    }
    Ok(out)
}

/// Serialize a quantized parameter plane.
pub fn write_quant_plane(q: &QuantizedNetwork) -> Result<Vec<u8>> {
    let layers = fixed_layer_refs(q)?;
    if layers.len() > u8::MAX as usize {
        return Err(Error::InvalidParams("too many layers for the plane format".into()));
    }
    let width = word_width(q.param_format);
    let mut buf = Vec::new();
    buf.extend_from_slice(FLNP_MAGIC);
    buf.write_u16::<LE>(FLNP_VERSION)?;
    buf.write_u8(layers.len() as u8)?;
    for l in &layers {
        write_desc(&mut buf, &l.desc)?;
        buf.write_u8(q.param_format.int_bits as u8)?;
        buf.write_u8(q.param_format.frac_bits as u8)?;
        for &w in l.weights {
            write_word(&mut buf, w, width);
        }
        for &s in l.scale {
            write_word(&mut buf, s, width);
        }
        for &s in l.shift {
            write_word(&mut buf, s, width);
        }
    }
    Ok(buf)
}

/// Parse a quantized plane and attach it to the float network it was
/// exported from. The descriptor records must match the float
/// architecture layer for layer.
pub fn read_quant_plane(
    cur: &mut Cursor<&[u8]>,
    float_net: &Network,
    fm_format: QFormat,
) -> Result<QuantizedNetwork> {
    check_magic(cur, FLNP_MAGIC, "parameter plane")?;
    check_version(cur, FLNP_VERSION, "parameter plane")?;
    let layer_count = cur.read_u8().map_err(|_| truncated("plane header"))? as usize;

    let expect_descs = {
        let mut descs = backbone_descs(&float_net.backbone)?;
        for head in [&float_net.head_a, &float_net.head_i] {
            for d in head.iter() {
                descs.push(dense_desc(d)?);
            }
        }
        descs
    };
    if layer_count != expect_descs.len() {
        return Err(Error::Format(format!(
            "plane has {layer_count} layers, model architecture has {}",
            expect_descs.len()
        )));
    }

    let mut param_format: Option<QFormat> = None;
    let mut raw = Vec::new();
    for expect in &expect_descs {
        let got = read_desc(cur)?;
        if got != *expect {
            return Err(Error::Format(
                "plane layer descriptor does not match the model architecture".into(),
            ));
        }
        let int_bits = cur.read_u8().map_err(|_| truncated("plane layer"))? as u32;
        let frac_bits = cur.read_u8().map_err(|_| truncated("plane layer"))? as u32;
        let fmt = QFormat::new(int_bits, frac_bits)?;
        match param_format {
            None => param_format = Some(fmt),
            Some(f) if f == fmt => {}
            Some(f) => {
                return Err(Error::Format(format!(
                    "mixed parameter formats in one plane ({f} vs {fmt}); this engine requires one"
                )))
            }
        }
        let width = word_width(fmt);
        let weight_count = if got.kind == KIND_DENSE_RELU || got.kind == KIND_DENSE_PLAIN {
            got.ch_in as usize * got.ch_out as usize
        } else {
            got.ch_in as usize * got.ch_out as usize * got.kernel as usize
        };
        for _ in 0..weight_count + 2 * got.ch_out as usize {
            raw.push(read_word(cur, width)?);
        }
    }
    let param_format = param_format.expect("at least one layer");
    // Build the integer skeleton from the float architecture, then
    // overwrite every raw word with the stored plane.
    let mut q = quantize_network_with(float_net, fm_format, param_format, 1.0)?;
    q.set_params_from_raw(&raw)?;
    q.param_saturation = Default::default();
    Ok(q)
}

// ---------------------------------------------------------------------------
// FLNM models
// ---------------------------------------------------------------------------

/// A model file: the float network plus an optional quantized plane.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub network: Network,
    pub quant: Option<QuantizedNetwork>,
}

/// Serialize a model. Float parameters are stored as binary32, so
/// parameters are rounded to f32 precision on the way through.
pub fn write_model(m: &ModelFile) -> Result<Vec<u8>> {
    let net = &m.network;
    net.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(FLNM_MAGIC);
    buf.write_u16::<LE>(FLNM_VERSION)?;
    buf.write_u8(net.variant.as_u8())?;
    buf.write_u64::<LE>(net.gate)?;

    let bb = backbone_descs(&net.backbone)?;
    if bb.len() > u8::MAX as usize {
        return Err(Error::InvalidParams("backbone too deep for the format".into()));
    }
    buf.write_u8(bb.len() as u8)?;
    for d in &bb {
        write_desc(&mut buf, d)?;
    }
    if net.head_a.len() != net.head_i.len() {
        return Err(Error::InvalidParams(
            "model file requires equally deep head stacks".into(),
        ));
    }
    buf.write_u8(net.head_a.len() as u8)?;
    for head in [&net.head_a, &net.head_i] {
        for d in head.iter() {
            write_desc(&mut buf, &dense_desc(d)?)?;
        }
    }

    let params = net.params_to_flat();
    buf.write_u32::<LE>(params.len() as u32)?;
    for p in &params {
        buf.write_f32::<LE>(*p as f32)?;
    }

    match &m.quant {
        None => buf.write_u8(0)?,
        Some(q) => {
            if q.variant != net.variant {
                return Err(Error::InvalidParams(
                    "quantized plane variant differs from the float model".into(),
                ));
            }
            buf.write_u8(1)?;
            buf.write_u8(q.fm_format.int_bits as u8)?;
            buf.write_u8(q.fm_format.frac_bits as u8)?;
            buf.extend_from_slice(&write_quant_plane(q)?);
        }
    }
    Ok(buf)
}

/// Parse a model file; the inverse of [`write_model`] (float parameters
/// come back at binary32 precision).
pub fn read_model(bytes: &[u8]) -> Result<ModelFile> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, FLNM_MAGIC, "model")?;
    check_version(&mut cur, FLNM_VERSION, "model")?;
    let variant = Variant::from_u8(cur.read_u8().map_err(|_| truncated("model header"))?)?;
    let gate = cur.read_u64::<LE>().map_err(|_| truncated("model header"))?;

    let bb_count = cur.read_u8().map_err(|_| truncated("model header"))? as usize;
    let mut bb_descs = Vec::with_capacity(bb_count);
    for _ in 0..bb_count {
        bb_descs.push(read_desc(&mut cur)?);
    }
    let backbone = rebuild_backbone(&bb_descs)?;

    let head_len = cur.read_u8().map_err(|_| truncated("model header"))? as usize;
    let read_head = |cur: &mut Cursor<&[u8]>| -> Result<Vec<AdderDense>> {
        (0..head_len)
            .map(|_| {
                let d = read_desc(cur)?;
                if d.kind != KIND_DENSE_RELU && d.kind != KIND_DENSE_PLAIN {
                    return Err(Error::Format(format!(
                        "head descriptor has non-dense kind {}",
                        d.kind
                    )));
                }
                Ok(AdderDense::new(
                    d.ch_in as usize,
                    d.ch_out as usize,
                    d.kind == KIND_DENSE_RELU,
                ))
            })
            .collect()
    };
    let head_a = read_head(&mut cur)?;
    let head_i = read_head(&mut cur)?;

    let mut network = Network {
        variant,
        backbone,
        head_a,
        head_i,
        gate,
    };
    network.validate()?;

    let param_count = cur.read_u32::<LE>().map_err(|_| truncated("model header"))? as usize;
    if param_count != network.param_count() {
        return Err(Error::Format(format!(
            "model stores {param_count} parameters but its architecture needs {}",
            network.param_count()
        )));
    }
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(cur.read_f32::<LE>().map_err(|_| truncated("model parameters"))? as f64);
    }
    network.set_params_from_flat(&params)?;

    let quant_flag = cur.read_u8().map_err(|_| truncated("model trailer"))?;
    let quant = match quant_flag {
        0 => None,
        1 => {
            let fm_int = cur.read_u8().map_err(|_| truncated("model trailer"))? as u32;
            let fm_frac = cur.read_u8().map_err(|_| truncated("model trailer"))? as u32;
            let fm = QFormat::new(fm_int, fm_frac)?;
            Some(read_quant_plane(&mut cur, &network, fm)?)
        }
        other => {
            return Err(Error::Format(format!(
                "unknown quantized-plane flag {other}"
            )))
        }
    };
    if cur.position() != bytes.len() as u64 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the model",
            bytes.len() as u64 - cur.position()
        )));
    }
    Ok(ModelFile { network, quant })
}

pub fn save_model(path: &Path, m: &ModelFile) -> Result<()> {
    atomic_write(path, &write_model(m)?)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    read_model(&std::fs::read(path)?)
}
