//! Windowed dataset construction: segmentation into fixed 35-sample
//! windows, labeling, normalization, train/val/test split, and a versioned
//! on-disk format.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OtdrError, Result};
use crate::sim::{build_pulse_template, simulate_batch, PulseTemplate, SimConfig, Trace};
use crate::util::{derive_seed, sha256_hex};

/// Window length in samples.
pub const WINDOW_LEN: usize = 35;

/// On-disk format version; readers reject anything else.
pub const FORMAT_VERSION: u32 = 1;

/// Windows sampled per trace.
pub const SEQUENCES_PER_TRACE: usize = 8;

/// Bytes per record in `sequences.bin`:
/// 35 × f32 values, u8 class_id, f32 position_idx (NaN when absent),
/// f32 reflectance_db (NaN when absent), f32 snr_db, u8 pattern_kind,
/// u64 source_trace_id; all little-endian.
pub const RECORD_BYTES: usize = WINDOW_LEN * 4 + 1 + 4 + 4 + 4 + 1 + 8;

/// RNG stream id for per-trace window extraction (sim uses 1 and 2).
const STREAM_EXTRACT: u64 = 3;
/// RNG stream id for deriving per-variant root seeds.
const STREAM_VARIANT: u64 = 4;

/// How a positive window covers the event template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    /// Negative window: no overlap with the event extent.
    None,
    /// The entire template lies inside the window.
    Whole,
    /// The template is clipped by a window edge.
    Partial,
}

impl PatternKind {
    fn to_byte(self) -> u8 {
        match self {
            PatternKind::None => 0,
            PatternKind::Whole => 1,
            PatternKind::Partial => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(PatternKind::None),
            1 => Ok(PatternKind::Whole),
            2 => Ok(PatternKind::Partial),
            _ => Err(OtdrError::Format(format!("invalid pattern_kind byte {b}"))),
        }
    }
}

/// Which positive-window population a dataset draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetVariant {
    /// Positives contain the whole template.
    Whole,
    /// Positives clip the template at a window edge.
    Partial,
    /// Positives drawn uniformly over all overlapping window starts.
    Mixed,
}

impl DatasetVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetVariant::Whole => "whole",
            DatasetVariant::Partial => "partial",
            DatasetVariant::Mixed => "mixed",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            DatasetVariant::Whole => 1,
            DatasetVariant::Partial => 2,
            DatasetVariant::Mixed => 3,
        }
    }
}

impl std::str::FromStr for DatasetVariant {
    type Err = OtdrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(DatasetVariant::Whole),
            "partial" => Ok(DatasetVariant::Partial),
            "mixed" => Ok(DatasetVariant::Mixed),
            _ => Err(OtdrError::Config(format!(
                "unknown dataset variant {s:?} (expected whole, partial, or mixed)"
            ))),
        }
    }
}

/// Split assignment for a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = OtdrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(OtdrError::Format(format!("unknown split name {s:?}"))),
        }
    }
}

/// One labeled 35-sample window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// Normalized power values in [0, 1].
    pub values: [f32; WINDOW_LEN],
    /// 0 = no reflective event, 1 = reflective event.
    pub class_id: u8,
    /// Fractional event-peak index within the window, in [0, 35);
    /// absent for class 0. Clamped to the visible extent for partials.
    pub position_idx: Option<f32>,
    /// Event reflectance in dB; absent for class 0.
    pub reflectance_db: Option<f32>,
    /// Trace SNR in dB (recorded for both classes).
    pub snr_db: f32,
    /// Window/event coverage relation.
    pub pattern_kind: PatternKind,
    /// Index of the source trace within its generation batch.
    pub source_trace_id: u64,
}

/// Per-split sequence counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

/// Generation record stored alongside the sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub variant: DatasetVariant,
    pub sim: SimConfig,
    pub n_traces: u64,
    pub n_sequences: u64,
    pub n_positive: u64,
    pub n_negative: u64,
    pub split_sizes: SplitSizes,
    /// SHA-256 of sequences.bin.
    pub sequences_sha256: String,
}

/// An immutable labeled dataset with its split assignment and manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    /// Split of `sequences[i]`; same length as `sequences`.
    pub split: Vec<Split>,
    pub manifest: DatasetManifest,
}

/// Split for trace `t` of `n`: first 60% train, next 20% val, rest test.
/// Integer arithmetic keeps the boundary exact for any `n`.
pub fn split_for_trace(t: usize, n: usize) -> Split {
    let (t, n) = (t as u64, n as u64);
    if t * 10 < n * 6 {
        Split::Train
    } else if t * 10 < n * 8 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Min-max normalization against the generation config's global scale:
/// min = 0 (trace baseline), max = largest noise-free peak amplitude.
/// Noise excursions outside [0, max] are clamped so values stay in [0, 1].
pub fn normalize_window(raw: &[f64], max_amplitude: f64) -> Result<[f32; WINDOW_LEN]> {
    if raw.len() != WINDOW_LEN {
        return Err(OtdrError::Shape(format!(
            "window must have {WINDOW_LEN} samples, got {}",
            raw.len()
        )));
    }
    if !(max_amplitude.is_finite() && max_amplitude > 0.0) {
        return Err(OtdrError::Domain(format!(
            "normalization max must be positive and finite, got {max_amplitude}"
        )));
    }
    let mut out = [0.0f32; WINDOW_LEN];
    for (o, &v) in out.iter_mut().zip(raw) {
        if v.is_nan() {
            return Err(OtdrError::Data("NaN sample in window".into()));
        }
        *o = (v / max_amplitude).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Inverse of [`normalize_window`] for values that were inside [0, max].
pub fn denormalize_value(v: f32, max_amplitude: f64) -> f64 {
    v as f64 * max_amplitude
}

/// Builds the labeled sequence for the window starting at `start`.
///
/// Class and pattern kind follow from the overlap between the window and
/// the event extent; the position label is the event peak in window
/// coordinates, clamped to the visible extent when the peak is clipped.
pub fn window_sequence(
    trace: &Trace,
    template: &PulseTemplate,
    start: usize,
    max_amplitude: f64,
    source_trace_id: u64,
) -> Result<Sequence> {
    let len = trace.samples.len();
    if start + WINDOW_LEN > len {
        return Err(OtdrError::Placement(format!(
            "window start {start} does not fit a {WINDOW_LEN}-sample window in \
             a {len}-sample trace"
        )));
    }
    let values = normalize_window(&trace.samples[start..start + WINDOW_LEN], max_amplitude)?;

    let (ev_start, ev_end) = trace.event_span(template); // [ev_start, ev_end)
    let overlaps = start < ev_end && start + WINDOW_LEN > ev_start;
    if !overlaps {
        return Ok(Sequence {
            values,
            class_id: 0,
            position_idx: None,
            reflectance_db: None,
            snr_db: trace.snr_db as f32,
            pattern_kind: PatternKind::None,
            source_trace_id,
        });
    }

    let whole = start <= ev_start && ev_end <= start + WINDOW_LEN;
    // Visible extent of the event, in window coordinates.
    let visible_lo = ev_start.max(start) - start;
    let visible_hi = (ev_end - 1).min(start + WINDOW_LEN - 1) - start;
    let raw_pos = trace.event_position_idx - start as f64;
    let pos = raw_pos.clamp(visible_lo as f64, visible_hi as f64);

    Ok(Sequence {
        values,
        class_id: 1,
        position_idx: Some(pos as f32),
        reflectance_db: Some(trace.reflectance_db as f32),
        snr_db: trace.snr_db as f32,
        pattern_kind: if whole { PatternKind::Whole } else { PatternKind::Partial },
        source_trace_id,
    })
}

/// Window starts whose span is disjoint from the event extent.
fn negative_starts(trace_len: usize, ev_start: usize, ev_end: usize) -> Vec<usize> {
    let max_start = trace_len - WINDOW_LEN;
    (0..=max_start)
        .filter(|&w| w + WINDOW_LEN <= ev_start || w >= ev_end)
        .collect()
}

/// Window starts overlapping the event extent, filtered to the variant's
/// pattern population.
fn positive_starts(
    trace_len: usize,
    ev_start: usize,
    ev_end: usize,
    variant: DatasetVariant,
) -> Vec<usize> {
    let max_start = trace_len - WINDOW_LEN;
    let lo = ev_start.saturating_sub(WINDOW_LEN - 1);
    let hi = (ev_end - 1).min(max_start);
    (lo..=hi)
        .filter(|&w| {
            let whole = w <= ev_start && ev_end <= w + WINDOW_LEN;
            match variant {
                DatasetVariant::Mixed => true,
                DatasetVariant::Whole => whole,
                DatasetVariant::Partial => !whole,
            }
        })
        .collect()
}

/// Draws `k` starts from `candidates`: without replacement when possible,
/// with replacement when fewer than `k` candidates exist.
fn draw_starts(candidates: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if candidates.len() >= k {
        sample_indices(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    } else {
        (0..k).map(|_| candidates[rng.random_range(0..candidates.len())]).collect()
    }
}

fn extract_sequences_variant(
    trace: &Trace,
    template: &PulseTemplate,
    max_amplitude: f64,
    source_trace_id: u64,
    variant: DatasetVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sequence>> {
    let len = trace.samples.len();
    if len < WINDOW_LEN {
        return Err(OtdrError::Extraction(format!(
            "trace of {len} samples is shorter than one {WINDOW_LEN}-sample window"
        )));
    }
    let (ev_start, ev_end) = trace.event_span(template);
    let negatives = negative_starts(len, ev_start, ev_end);
    if negatives.len() < SEQUENCES_PER_TRACE / 2 {
        return Err(OtdrError::Extraction(format!(
            "trace supplies only {} event-free window starts, need {}",
            negatives.len(),
            SEQUENCES_PER_TRACE / 2
        )));
    }
    let positives = positive_starts(len, ev_start, ev_end, variant);
    if positives.is_empty() {
        return Err(OtdrError::Extraction(format!(
            "no {} window starts exist for an event of extent {} in a \
             {len}-sample trace",
            variant.as_str(),
            ev_end - ev_start
        )));
    }

    let mut out = Vec::with_capacity(SEQUENCES_PER_TRACE);
    for w in draw_starts(&negatives, SEQUENCES_PER_TRACE / 2, rng) {
        out.push(window_sequence(trace, template, w, max_amplitude, source_trace_id)?);
    }
    for w in draw_starts(&positives, SEQUENCES_PER_TRACE / 2, rng) {
        out.push(window_sequence(trace, template, w, max_amplitude, source_trace_id)?);
    }
    Ok(out)
}

/// Extracts 8 labeled windows from a trace: 4 disjoint from the event
/// (class 0) and 4 overlapping it (class 1), window starts drawn uniformly
/// without replacement from each population.
pub fn extract_sequences(
    trace: &Trace,
    template: &PulseTemplate,
    max_amplitude: f64,
    source_trace_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sequence>> {
    extract_sequences_variant(
        trace,
        template,
        max_amplitude,
        source_trace_id,
        DatasetVariant::Mixed,
        rng,
    )
}

fn build_variant(cfg: &SimConfig, n_traces: usize, variant: DatasetVariant) -> Result<Dataset> {
    if n_traces < 5 {
        return Err(OtdrError::Config(format!(
            "building a dataset needs at least 5 traces, got {n_traces}"
        )));
    }
    cfg.validate()?;
    let template = build_pulse_template(cfg)?;
    let max_amplitude = cfg.max_amplitude();
    let traces = simulate_batch(cfg, n_traces)?;

    let per_trace: Vec<Vec<Sequence>> = traces
        .par_iter()
        .enumerate()
        .map(|(i, trace)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.rng_seed,
                &[STREAM_EXTRACT, i as u64],
            ));
            extract_sequences_variant(trace, &template, max_amplitude, i as u64, variant, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut sequences = Vec::with_capacity(n_traces * SEQUENCES_PER_TRACE);
    let mut split = Vec::with_capacity(n_traces * SEQUENCES_PER_TRACE);
    for (t, seqs) in per_trace.into_iter().enumerate() {
        let s = split_for_trace(t, n_traces);
        for seq in seqs {
            sequences.push(seq);
            split.push(s);
        }
    }

    let n_positive = sequences.iter().filter(|s| s.class_id == 1).count() as u64;
    let count = |which: Split| split.iter().filter(|&&s| s == which).count() as u64;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        variant,
        sim: cfg.clone(),
        n_traces: n_traces as u64,
        n_sequences: sequences.len() as u64,
        n_positive,
        n_negative: sequences.len() as u64 - n_positive,
        split_sizes: SplitSizes {
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
        },
        sequences_sha256: sha256_hex(&encode_records(&sequences)),
    };
    Ok(Dataset { sequences, split, manifest })
}

/// Builds the training dataset: `8 * n_traces` sequences with positive
/// windows drawn over the full whole/partial mix, split 60/20/20 by trace.
pub fn build_dataset(cfg: &SimConfig, n_traces: usize) -> Result<Dataset> {
    build_variant(cfg, n_traces, DatasetVariant::Mixed)
}

/// Builds one evaluation dataset whose positive windows are constrained to
/// `variant`. The root seed is re-derived per variant, so these sets are
/// disjoint from a training set built with the same config.
pub fn build_eval_variant(
    cfg: &SimConfig,
    n_traces: usize,
    variant: DatasetVariant,
) -> Result<Dataset> {
    let mut derived = cfg.clone();
    derived.rng_seed = derive_seed(cfg.rng_seed, &[STREAM_VARIANT, variant.stream_id()]);
    build_variant(&derived, n_traces, variant)
}

/// Builds the three evaluation datasets: whole-only, partial-only, mixed.
pub fn build_eval_variants(cfg: &SimConfig, n_traces: usize) -> Result<[Dataset; 3]> {
    Ok([
        build_eval_variant(cfg, n_traces, DatasetVariant::Whole)?,
        build_eval_variant(cfg, n_traces, DatasetVariant::Partial)?,
        build_eval_variant(cfg, n_traces, DatasetVariant::Mixed)?,
    ])
}

fn encode_records(sequences: &[Sequence]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(sequences.len() * RECORD_BYTES);
    for s in sequences {
        for v in &s.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(s.class_id);
        buf.extend_from_slice(&s.position_idx.unwrap_or(f32::NAN).to_le_bytes());
        buf.extend_from_slice(&s.reflectance_db.unwrap_or(f32::NAN).to_le_bytes());
        buf.extend_from_slice(&s.snr_db.to_le_bytes());
        buf.push(s.pattern_kind.to_byte());
        buf.extend_from_slice(&s.source_trace_id.to_le_bytes());
    }
    buf
}

fn decode_records(bytes: &[u8]) -> Result<Vec<Sequence>> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(OtdrError::Format(format!(
            "sequences.bin length {} is not a multiple of the {RECORD_BYTES}-byte \
             record size",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let mut off = 0usize;
        let f32_at = |o: &mut usize| {
            let v = f32::from_le_bytes(rec[*o..*o + 4].try_into().unwrap());
            *o += 4;
            v
        };
        let mut values = [0.0f32; WINDOW_LEN];
        for v in values.iter_mut() {
            *v = f32_at(&mut off);
        }
        let class_id = rec[off];
        off += 1;
        if class_id > 1 {
            return Err(OtdrError::Format(format!("invalid class_id byte {class_id}")));
        }
        let pos = f32_at(&mut off);
        let refl = f32_at(&mut off);
        let snr_db = f32_at(&mut off);
        let pattern_kind = PatternKind::from_byte(rec[off])?;
        off += 1;
        let source_trace_id = u64::from_le_bytes(rec[off..off + 8].try_into().unwrap());

        let (position_idx, reflectance_db) = if class_id == 1 {
            if pos.is_nan() || refl.is_nan() {
                return Err(OtdrError::Format(
                    "class-1 record with absent position or reflectance label".into(),
                ));
            }
            (Some(pos), Some(refl))
        } else {
            if !pos.is_nan() || !refl.is_nan() {
                return Err(OtdrError::Format(
                    "class-0 record carries position or reflectance labels".into(),
                ));
            }
            (None, None)
        };
        out.push(Sequence {
            values,
            class_id,
            position_idx,
            reflectance_db,
            snr_db,
            pattern_kind,
            source_trace_id,
        });
    }
    Ok(out)
}

impl Dataset {
    /// Indices of sequences assigned to `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sequences assigned to `split`, in dataset order.
    pub fn subset(&self, split: Split) -> Vec<&Sequence> {
        self.sequences
            .iter()
            .zip(&self.split)
            .filter(|(_, &s)| s == split)
            .map(|(seq, _)| seq)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Writes `manifest.json`, `sequences.bin`, and `split.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let records = encode_records(&self.sequences);
        fs::write(dir.join("sequences.bin"), &records)?;

        let mut writer = csv::Writer::from_path(dir.join("split.csv"))
            .map_err(|e| OtdrError::Format(format!("writing split.csv: {e}")))?;
        writer
            .write_record(["index", "split"])
            .and_then(|()| {
                self.split.iter().enumerate().try_for_each(|(i, s)| {
                    writer.write_record([i.to_string().as_str(), s.as_str()])
                })
            })
            .and_then(|()| writer.flush().map_err(csv::Error::from))
            .map_err(|e| OtdrError::Format(format!("writing split.csv: {e}")))?;

        let mut manifest = self.manifest.clone();
        manifest.sequences_sha256 = sha256_hex(&records);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| OtdrError::Format(format!("encoding manifest: {e}")))?;
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    /// Loads a dataset directory, verifying format version, checksum, and
    /// label coherence.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| OtdrError::Format(format!("parsing manifest.json: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(OtdrError::Format(format!(
                "unsupported dataset format version {} (reader supports {FORMAT_VERSION})",
                manifest.format_version
            )));
        }

        let records = fs::read(dir.join("sequences.bin"))?;
        let checksum = sha256_hex(&records);
        if checksum != manifest.sequences_sha256 {
            return Err(OtdrError::Format(format!(
                "sequences.bin checksum mismatch: manifest says {}, file is {checksum}",
                manifest.sequences_sha256
            )));
        }
        let sequences = decode_records(&records)?;
        if sequences.len() as u64 != manifest.n_sequences {
            return Err(OtdrError::Format(format!(
                "manifest promises {} sequences, file holds {}",
                manifest.n_sequences,
                sequences.len()
            )));
        }

        let mut reader = csv::Reader::from_path(dir.join("split.csv"))
            .map_err(|e| OtdrError::Format(format!("reading split.csv: {e}")))?;
        let mut split = Vec::with_capacity(sequences.len());
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| OtdrError::Format(format!("reading split.csv: {e}")))?;
            if row.len() != 2 || row[0].parse::<usize>().ok() != Some(i) {
                return Err(OtdrError::Format(format!("malformed split.csv row {i}")));
            }
            split.push(row[1].parse::<Split>()?);
        }
        if split.len() != sequences.len() {
            return Err(OtdrError::Format(format!(
                "split.csv lists {} sequences, sequences.bin holds {}",
                split.len(),
                sequences.len()
            )));
        }
        Ok(Dataset { sequences, split, manifest })
    }
}
