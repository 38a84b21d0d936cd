//! Channel-wise magnitude equalization.
//!
//! Every record is reweighted by a parameter-free inverted
//! squeeze-and-excitation: channel `c` gets the factor
//! `k[c] = exp(-g[c]) / sum_c' exp(-g[c'])`, where `g` is a per-channel
//! magnitude statistic. Loud channels are squeezed and quiet ones excited.
//! The scaled channels are then resampled onto a fixed `H x W` grid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{rms, window_record, Dataset, EcgRecord};
use crate::error::{Error, Result};

/// Which per-channel magnitude feeds the CME softmax.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeStatistic {
    /// Root-mean-square amplitude; independent of record length.
    #[default]
    Rms,
    /// Raw Euclidean norm of the channel.
    L2Norm,
}

impl MagnitudeStatistic {
    pub fn of(self, channel: &[f64]) -> f64 {
        match self {
            MagnitudeStatistic::Rms => rms(channel),
            MagnitudeStatistic::L2Norm => channel.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Dataset-level magnitude diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMagnitudeStats {
    /// RMS of each channel pooled over every sample of every record.
    pub per_channel_rms: Vec<f64>,
    /// Mean absolute amplitude of each channel, `(1/T) sum |x(t)|`, pooled.
    pub per_channel_mean_power: Vec<f64>,
    /// `per_class_scale[m][c]`: mean per-record RMS of channel `c` over class
    /// `m`, divided by the grand mean of per-record channel RMS. `None` when
    /// class `m` has no records.
    pub per_class_scale: Vec<Option<Vec<f64>>>,
    pub class_counts: Vec<usize>,
}

pub fn channel_stats(dataset: &Dataset) -> Result<ChannelMagnitudeStats> {
    let c_count = dataset.num_channels().ok_or(Error::EmptyDataset)?;
    let labels = dataset.labels()?;
    let m_count = dataset.num_classes();

    let mut sum_sq = vec![0.0; c_count];
    let mut sum_abs = vec![0.0; c_count];
    let mut samples = 0usize;
    let mut class_rms_sum = vec![vec![0.0; c_count]; m_count];
    let mut class_counts = vec![0usize; m_count];
    let mut grand_sum = 0.0;

    for (record, &label) in dataset.records().iter().zip(&labels) {
        samples += record.len();
        class_counts[label] += 1;
        for (c, ch) in record.channels().enumerate() {
            sum_sq[c] += ch.iter().map(|v| v * v).sum::<f64>();
            sum_abs[c] += ch.iter().map(|v| v.abs()).sum::<f64>();
            let r = rms(ch);
            class_rms_sum[label][c] += r;
            grand_sum += r;
        }
    }

    let n = samples as f64;
    let grand_mean = grand_sum / (dataset.len() * c_count) as f64;
    let per_class_scale = class_rms_sum
        .into_iter()
        .zip(&class_counts)
        .map(|(sums, &count)| {
            (count > 0).then(|| {
                sums.iter()
                    .map(|s| {
                        let mean = s / count as f64;
                        if grand_mean > 0.0 {
                            mean / grand_mean
                        } else {
                            1.0
                        }
                    })
                    .collect()
            })
        })
        .collect();

    Ok(ChannelMagnitudeStats {
        per_channel_rms: sum_sq.iter().map(|s| (s / n).sqrt()).collect(),
        per_channel_mean_power: sum_abs.iter().map(|s| s / n).collect(),
        per_class_scale,
        class_counts,
    })
}

impl ChannelMagnitudeStats {
    /// One row per channel: `channel,rms,mean_power,scale_<class>...`.
    /// Classes without records leave their column empty.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("channel,rms,mean_power");
        for name in class_names {
            out.push_str(",scale_");
            out.push_str(name);
        }
        out.push('\n');
        for c in 0..self.per_channel_rms.len() {
            out.push_str(&format!(
                "{c},{},{}",
                self.per_channel_rms[c], self.per_channel_mean_power[c]
            ));
            for row in &self.per_class_scale {
                out.push(',');
                if let Some(row) = row {
                    out.push_str(&row[c].to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Per-channel CME factors: positive, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScaleFactors(Vec<f64>);

impl ChannelScaleFactors {
    /// Validates a factor vector: nonnegative, finite, summing to 1 within 1e-12.
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if k.is_empty() || k.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Spec(
                "scale factors must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = k.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("scale factors sum to {total}, not 1")));
        }
        Ok(Self(k))
    }

    pub fn uniform(channels: usize) -> Self {
        Self(vec![1.0 / channels as f64; channels])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax of `-magnitudes`. The normaliser is summed in sorted order so the
/// result is exactly permutation-equivariant.
pub fn inverted_softmax(magnitudes: &[f64]) -> Vec<f64> {
    let min = magnitudes.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = magnitudes.iter().map(|g| (min - g).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn channel_magnitudes(record: &EcgRecord, statistic: MagnitudeStatistic) -> Vec<f64> {
    record.channels().map(|ch| statistic.of(ch)).collect()
}

/// CME factors using the default RMS statistic.
pub fn cme_factors(record: &EcgRecord) -> ChannelScaleFactors {
    cme_factors_with(record, MagnitudeStatistic::Rms)
}

pub fn cme_factors_with(record: &EcgRecord, statistic: MagnitudeStatistic) -> ChannelScaleFactors {
    ChannelScaleFactors(inverted_softmax(&channel_magnitudes(record, statistic)))
}

/// Hadamard product of each channel with its factor.
pub fn scale_channels(record: &EcgRecord, k: &ChannelScaleFactors) -> Result<EcgRecord> {
    if k.len() != record.num_channels() {
        return Err(Error::Dimension {
            expected: record.num_channels(),
            actual: k.len(),
        });
    }
    let samples = record
        .channels()
        .zip(k.as_slice())
        .flat_map(|(ch, &f)| ch.iter().map(move |v| v * f))
        .collect();
    Ok(record.with_samples(samples))
}

fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    if a == b || frac == 0.0 {
        return a;
    }
    let v = a * (1.0 - frac) + b * frac;
    v.clamp(a.min(b), a.max(b))
}

/// Piecewise-linear resampling onto `out_len` uniformly spaced points with the
/// endpoints mapped to the endpoints.
pub fn resample_linear(xs: &[f64], out_len: usize) -> Vec<f64> {
    let n = xs.len();
    if n == 0 || out_len == 0 {
        return Vec::new();
    }
    if out_len == 1 || n == 1 {
        return vec![xs[0]; out_len];
    }
    let span = (n - 1) as f64;
    let steps = (out_len - 1) as f64;
    (0..out_len)
        .map(|j| {
            let pos = (j as f64 * span) / steps;
            let i = pos.floor() as usize;
            if i >= n - 1 {
                xs[n - 1]
            } else {
                lerp(xs[i], xs[i + 1], pos - i as f64)
            }
        })
        .collect()
}

/// Fixed-size image produced from a (scaled) record.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    source_id: String,
}

impl EncodedImage {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Dimension {
                expected: height * width,
                actual: pixels.len(),
            });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Encode("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Row-major pixels.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.width..(i + 1) * self.width]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.height {
            let row: Vec<String> = self.row(i).iter().map(f64::to_string).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// `H` and `W` as little-endian u64, then the pixels as little-endian f64.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.pixels.len());
        out.extend_from_slice(&(self.height as u64).to_le_bytes());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8], source_id: impl Into<String>) -> Result<Self> {
        let header = |i: usize| -> Result<usize> {
            let chunk = bytes
                .get(i * 8..(i + 1) * 8)
                .ok_or_else(|| Error::Encode("truncated header".into()))?;
            Ok(u64::from_le_bytes(chunk.try_into().expect("8-byte slice")) as usize)
        };
        let (height, width) = (header(0)?, header(1)?);
        let body = &bytes[16..];
        if height.checked_mul(width).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
            return Err(Error::Encode(format!(
                "body of {} bytes does not hold {height}x{width} f64 pixels",
                body.len()
            )));
        }
        let pixels = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(height, width, pixels, source_id)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Resamples every channel from `L` to `width` samples, then expands the `C`
/// channel rows to `height` rows by linear interpolation along the channel
/// axis. No normalisation is applied.
pub fn encode_image(record: &EcgRecord, height: usize, width: usize) -> Result<EncodedImage> {
    let c_count = record.num_channels();
    if record.len() < 2 {
        return Err(Error::Encode(format!(
            "record {} has {} samples, need at least 2",
            record.record_id(),
            record.len()
        )));
    }
    if height < c_count {
        return Err(Error::Encode(format!(
            "height {height} is smaller than the channel count {c_count}"
        )));
    }
    if width == 0 {
        return Err(Error::Encode("width must be positive".into()));
    }
    let rows: Vec<Vec<f64>> = record
        .channels()
        .map(|ch| resample_linear(ch, width))
        .collect();

    let mut pixels = Vec::with_capacity(height * width);
    for i in 0..height {
        let (lo, frac) = if c_count == 1 {
            (0, 0.0)
        } else {
            let pos = (i as f64 * (c_count - 1) as f64) / (height - 1) as f64;
            let lo = (pos.floor() as usize).min(c_count - 1);
            (lo, pos - lo as f64)
        };
        if lo + 1 >= c_count || frac == 0.0 {
            pixels.extend_from_slice(&rows[lo]);
        } else {
            pixels.extend(
                rows[lo]
                    .iter()
                    .zip(&rows[lo + 1])
                    .map(|(&a, &b)| lerp(a, b, frac)),
            );
        }
    }
    EncodedImage::new(height, width, pixels, record.record_id())
}

/// Parameters of the full CME preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmeConfig {
    pub skip: usize,
    pub take: usize,
    pub height: usize,
    pub width: usize,
    pub statistic: MagnitudeStatistic,
}

impl Default for CmeConfig {
    fn default() -> Self {
        Self {
            skip: 500,
            take: 2500,
            height: 128,
            width: 128,
            statistic: MagnitudeStatistic::Rms,
        }
    }
}

/// window(500, 2500) -> CME factors -> scaling -> image of `height x width`.
pub fn cme_pipeline(record: &EcgRecord, height: usize, width: usize) -> Result<EncodedImage> {
    cme_pipeline_with(
        record,
        &CmeConfig {
            height,
            width,
            ..CmeConfig::default()
        },
    )
}

pub fn cme_pipeline_with(record: &EcgRecord, cfg: &CmeConfig) -> Result<EncodedImage> {
    let windowed = window_record(record, cfg.skip, cfg.take)?;
    let k = cme_factors_with(&windowed, cfg.statistic);
    let scaled = scale_channels(&windowed, &k)?;
    encode_image(&scaled, cfg.height, cfg.width)
}
