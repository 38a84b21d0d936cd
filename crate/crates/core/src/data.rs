//! Records, datasets and the ingestion/splitting protocol.
//!
//! Amplitudes are stored channel-major: channel `c` occupies
//! `samples[c * len .. (c + 1) * len]`.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floor_snapped;

/// Diagnostic classes of the 12-lead arrhythmia benchmark, in the order the
/// synthetic generator and the CLI use by default.
pub const CANONICAL_CLASSES: [&str; 9] = [
    "RBBB", "AF", "Normal", "STD", "I-AVB", "PVC", "PAC", "STE", "LBBB",
];

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    record_id: String,
    sample_rate: f64,
    label: Option<usize>,
    num_channels: usize,
    len: usize,
    samples: Vec<f64>,
}

impl EcgRecord {
    /// Builds a record from one amplitude vector per channel.
    pub fn new(
        record_id: impl Into<String>,
        channels: Vec<Vec<f64>>,
        sample_rate: f64,
        label: Option<usize>,
    ) -> Result<Self> {
        let record_id = record_id.into();
        let num_channels = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|ch| ch.len() != len) {
            return Err(Error::MalformedRecord(record_id));
        }
        let samples = channels.into_iter().flatten().collect();
        Self::from_channel_major(record_id, num_channels, len, samples, sample_rate, label)
    }

    /// Builds a record from a flat channel-major buffer.
    pub fn from_channel_major(
        record_id: impl Into<String>,
        num_channels: usize,
        len: usize,
        samples: Vec<f64>,
        sample_rate: f64,
        label: Option<usize>,
    ) -> Result<Self> {
        let record_id = record_id.into();
        if num_channels == 0 || len == 0 || samples.len() != num_channels * len {
            return Err(Error::MalformedRecord(record_id));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::Spec(format!(
                "record {record_id}: sample rate must be positive, got {sample_rate}"
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                record_id,
                row: pos % len,
                col: pos / len,
            });
        }
        Ok(Self {
            record_id,
            sample_rate,
            label,
            num_channels,
            len,
            samples,
        })
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    /// Number of samples per channel.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    pub fn channels(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.samples.chunks_exact(self.len)
    }

    /// Channel-major amplitudes.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn with_record_id(mut self, record_id: impl Into<String>) -> Self {
        self.record_id = record_id.into();
        self
    }

    /// Same metadata, new channel-major amplitudes of identical shape.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        Self {
            samples,
            ..self.clone()
        }
    }
}

/// Root-mean-square of a slice.
pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<EcgRecord>,
    class_names: Vec<String>,
    seed: u64,
}

impl Dataset {
    pub fn new(records: Vec<EcgRecord>, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Spec(format!(
                "need at least 2 classes, got {}",
                class_names.len()
            )));
        }
        if let Some(first) = records.first() {
            let (c, rate) = (first.num_channels(), first.sample_rate());
            for r in &records {
                if r.num_channels() != c {
                    return Err(Error::Dimension {
                        expected: c,
                        actual: r.num_channels(),
                    });
                }
                if r.sample_rate() != rate {
                    return Err(Error::Spec(format!(
                        "record {}: sample rate {} differs from {}",
                        r.record_id(),
                        r.sample_rate(),
                        rate
                    )));
                }
            }
        }
        let m = class_names.len();
        for r in &records {
            if let Some(label) = r.label() {
                if label >= m {
                    return Err(Error::UnknownClass {
                        record_id: r.record_id().to_string(),
                        label,
                        classes: m,
                    });
                }
            }
        }
        Ok(Self {
            records,
            class_names,
            seed,
        })
    }

    pub fn records(&self) -> &[EcgRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EcgRecord> {
        self.records
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Channel count shared by every record, `None` for an empty dataset.
    pub fn num_channels(&self) -> Option<usize> {
        self.records.first().map(EcgRecord::num_channels)
    }

    /// Histogram of labels; unlabeled records are not counted.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for label in self.records.iter().filter_map(EcgRecord::label) {
            counts[label] += 1;
        }
        counts
    }

    /// A dataset with the same classes and seed but different records.
    pub fn with_records(&self, records: Vec<EcgRecord>) -> Result<Self> {
        Self::new(records, self.class_names.clone(), self.seed)
    }

    pub(crate) fn labels(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                r.label()
                    .ok_or_else(|| Error::Config(format!("record {} has no label", r.record_id())))
            })
            .collect()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    file: String,
    record_id: String,
    label: usize,
    sample_rate: f64,
}

/// Reads one record CSV: `L` rows of `C` comma-separated amplitudes.
pub fn read_record_csv(
    path: &Path,
    record_id: &str,
    sample_rate: f64,
    label: Option<usize>,
) -> Result<EcgRecord> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let fields = result.map_err(|e| Error::parse(path, e))?;
        if let Some(first) = rows.first() {
            if fields.len() != first.len() {
                return Err(Error::MalformedRecord(record_id.to_string()));
            }
        }
        let values = fields
            .iter()
            .enumerate()
            .map(|(col, s)| {
                let v: f64 = s.trim().parse().map_err(|_| {
                    Error::parse(
                        path,
                        format!("row {row}, column {col}: not a number: {s:?}"),
                    )
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteSample {
                        record_id: record_id.to_string(),
                        row,
                        col,
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    let len = rows.len();
    let num_channels = rows.first().map_or(0, Vec::len);
    let mut samples = vec![0.0; len * num_channels];
    for (t, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            samples[c * len + t] = *v;
        }
    }
    EcgRecord::from_channel_major(record_id, num_channels, len, samples, sample_rate, label)
}

/// Loads the records listed in a manifest (`file,record_id,label,sample_rate`).
/// Record paths are resolved relative to the manifest's directory and records
/// keep manifest order.
pub fn load_csv(manifest: &Path, class_names: Vec<String>) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| Error::parse(manifest, e))?;
    let m = class_names.len();
    let mut records = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::parse(manifest, e))?;
        if row.label >= m {
            return Err(Error::UnknownClass {
                record_id: row.record_id,
                label: row.label,
                classes: m,
            });
        }
        let path = base.join(&row.file);
        records.push(read_record_csv(
            &path,
            &row.record_id,
            row.sample_rate,
            Some(row.label),
        )?);
    }
    Dataset::new(records, class_names, 0)
}

/// Loads a dataset directory: `manifest.csv` plus an optional `classes.csv`
/// (one class name per line). Without `classes.csv` the canonical nine
/// classes are assumed.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Error::parse(manifest, "manifest not found"));
    }
    let classes_path = dir.join(CLASSES_FILE);
    let class_names = if classes_path.is_file() {
        fs::read_to_string(&classes_path)
            .map_err(|e| Error::io(&classes_path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        CANONICAL_CLASSES.iter().map(|s| s.to_string()).collect()
    };
    load_csv(&manifest, class_names)
}

pub fn write_record_csv(record: &EcgRecord, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::new();
    for t in 0..record.len() {
        line.clear();
        for c in 0..record.num_channels() {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&record.channel(c)[t].to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `manifest.csv`, `classes.csv` and one CSV per record into `dir`.
/// Unlabeled records cannot be represented in the manifest.
pub fn write_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let classes_path = dir.join(CLASSES_FILE);
    let mut classes = dataset.class_names().join("\n");
    classes.push('\n');
    fs::write(&classes_path, classes).map_err(|e| Error::io(&classes_path, e))?;

    let manifest = dir.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::parse(&manifest, e))?;
    for record in dataset.records() {
        let label = record
            .label()
            .ok_or_else(|| Error::Config(format!("record {} has no label", record.record_id())))?;
        let file = format!("{}.csv", sanitize_file_stem(record.record_id()));
        write_record_csv(record, &dir.join(&file))?;
        writer
            .serialize(ManifestRow {
                file,
                record_id: record.record_id().to_string(),
                label,
                sample_rate: record.sample_rate(),
            })
            .map_err(|e| Error::parse(&manifest, e))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))
}

/// File-system-safe stem for a record id.
pub fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' {
                ch
            } else {
                '_'
            }
        })
        .collect()
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub len: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    pub per_class_counts: Vec<usize>,
    pub channel_gain: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

fn default_sample_rate() -> f64 {
    500.0
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec("num_classes must be at least 2".into()));
        }
        if self.per_class_counts.len() != self.num_classes {
            return Err(Error::Spec(format!(
                "per_class_counts has {} entries for {} classes",
                self.per_class_counts.len(),
                self.num_classes
            )));
        }
        if self.channels == 0 || self.len == 0 {
            return Err(Error::Spec("channels and len must be positive".into()));
        }
        if self.channel_gain.len() != self.channels {
            return Err(Error::Spec(format!(
                "channel_gain has {} entries for {} channels",
                self.channel_gain.len(),
                self.channels
            )));
        }
        if self
            .channel_gain
            .iter()
            .any(|g| !(g.is_finite() && *g > 0.0))
        {
            return Err(Error::Spec("channel_gain entries must be positive".into()));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::Spec("noise_sd must be nonnegative".into()));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::Spec("sample_rate must be positive".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::Spec(format!(
                    "class_names has {} entries for {} classes",
                    names.len(),
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    fn resolved_class_names(&self) -> Vec<String> {
        match &self.class_names {
            Some(names) => names.clone(),
            None if self.num_classes <= CANONICAL_CLASSES.len() => CANONICAL_CLASSES
                [..self.num_classes]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            None => (0..self.num_classes).map(|m| format!("class{m}")).collect(),
        }
    }
}

/// Noise-free beat train of class `m` at time `t` seconds.
///
/// Each class has its own fundamental (1 Hz + m Hz) and its own pulse shape:
/// three Gaussian bumps standing in for the P wave, QRS complex and T wave.
pub fn class_waveform(m: usize, t: f64) -> f64 {
    let freq = 1.0 + m as f64;
    let phase = (freq * t).fract();
    let qrs_width = 0.03 + 0.01 * (m % 3) as f64;
    let p_amp = 0.15 + 0.05 * (m % 2) as f64;
    let t_sign = if m % 4 == 3 { -1.0 } else { 1.0 };
    let t_amp = t_sign * (0.25 + 0.05 * (m % 5) as f64);
    let bump = |center: f64, width: f64| (-0.5 * ((phase - center) / width).powi(2)).exp();
    p_amp * bump(0.2, 0.04) + bump(0.4, qrs_width) + t_amp * bump(0.7, 0.06)
}

/// Deterministic synthetic dataset. Record `i` of class `m` carries the class
/// waveform scaled per channel by `channel_gain`, plus i.i.d. Gaussian noise.
/// The seed drives only the noise and the final record order.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Spec(e.to_string()))?;
    let (c_count, len) = (spec.channels, spec.len);

    let total: usize = spec.per_class_counts.iter().sum();
    let mut records = Vec::with_capacity(total);
    for (m, &count) in spec.per_class_counts.iter().enumerate() {
        let base: Vec<f64> = (0..len)
            .map(|t| class_waveform(m, t as f64 / spec.sample_rate))
            .collect();
        for _ in 0..count {
            let mut samples = Vec::with_capacity(c_count * len);
            for &gain in &spec.channel_gain {
                samples.extend(base.iter().map(|v| gain * v));
            }
            if spec.noise_sd > 0.0 {
                for v in samples.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            let id = format!("syn{:06}", records.len());
            records.push(EcgRecord::from_channel_major(
                id,
                c_count,
                len,
                samples,
                spec.sample_rate,
                Some(m),
            )?);
        }
    }
    records.shuffle(&mut rng);
    Dataset::new(records, spec.resolved_class_names(), spec.seed)
}

/// A pure tone record, handy for frequency-preservation checks.
pub fn sine_record(
    record_id: &str,
    channels: usize,
    len: usize,
    sample_rate: f64,
    freq: f64,
) -> Result<EcgRecord> {
    let tone: Vec<f64> = (0..len)
        .map(|t| (2.0 * PI * freq * t as f64 / sample_rate).sin())
        .collect();
    EcgRecord::new(record_id, vec![tone; channels], sample_rate, None)
}

/// Keeps samples `skip .. skip + take` of every channel.
pub fn window_record(record: &EcgRecord, skip: usize, take: usize) -> Result<EcgRecord> {
    let len = record.len();
    if take == 0 || skip.checked_add(take).is_none_or(|end| end > len) {
        return Err(Error::WindowOutOfRange { skip, take, len });
    }
    let samples = record
        .channels()
        .flat_map(|ch| ch[skip..skip + take].iter().copied())
        .collect();
    EcgRecord::from_channel_major(
        record.record_id(),
        record.num_channels(),
        take,
        samples,
        record.sample_rate(),
        record.label(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Spec(format!(
                "train_fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        Ok(Self {
            train_fraction,
            seed,
        })
    }

    pub fn test_fraction(&self) -> f64 {
        1.0 - self.train_fraction
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Stratified train/test split: per class, `floor(count * train_fraction)`
/// seeded-random records go to train and the rest to test.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = SplitSpec::new(spec.train_fraction, spec.seed)?;
    let labels = dataset.labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for mut members in by_class {
        members.shuffle(&mut rng);
        let n_train = floor_snapped(members.len() as f64 * spec.train_fraction) as usize;
        test_idx.extend_from_slice(&members[n_train..]);
        members.truncate(n_train);
        train_idx.extend(members);
    }
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);

    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.records[i].clone()).collect();
    Ok((
        dataset.with_records(pick(&train_idx))?,
        dataset.with_records(pick(&test_idx))?,
    ))
}

/// Resolves a path relative to a base directory unless it is absolute.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
