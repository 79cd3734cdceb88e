//! Time-series samples and datasets: validation, the on-disk JSON-lines
//! format, resampling onto uniform grids, observation dropping,
//! normalization and synthetic domain-shift data.

pub mod csv_import;
pub mod spline;
pub mod synthetic;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub use spline::Interpolation;
pub use synthetic::{generate_synthetic, LatentClass, SyntheticShiftSpec};

/// Minimum series length; the derivative stencil reads two steps back.
pub const MIN_LENGTH: usize = 3;

/// One multivariate series: `values` is `[T, d]`, rows are time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    values: Tensor<f64>,
    timestamps: Option<Vec<f64>>,
    label: Option<usize>,
}

impl TimeSeriesSample {
    pub fn new(values: Tensor<f64>, timestamps: Option<Vec<f64>>, label: Option<usize>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::invalid("sample", format!("values must be [T, d], got {:?}", values.shape())));
        }
        let len = values.shape()[0];
        if len < MIN_LENGTH {
            return Err(Error::invalid("sample", format!("length {len} is below the minimum of {MIN_LENGTH}")));
        }
        if let Some(t) = &timestamps {
            if t.len() != len {
                return Err(Error::invalid("sample", format!("{} timestamps for {len} steps", t.len())));
            }
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("sample timestamps"));
            }
            if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
                return Err(Error::invalid(
                    "sample",
                    format!("timestamps not strictly increasing at step {}", i + 1),
                ));
            }
        }
        Ok(Self {
            values,
            timestamps,
            label,
        })
    }

    /// Builds a sample from per-channel series.
    pub fn from_channels(channels: &[Vec<f64>], label: Option<usize>) -> Result<Self> {
        let d = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if d == 0 || channels.iter().any(|c| c.len() != len) || len == 0 {
            return Err(Error::invalid("sample", "channels must be non-empty and equally long"));
        }
        let values = Tensor::new([len, d], (0..len * d).map(|i| channels[i % d][i / d]).collect())?;
        Self::new(values, None, label)
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Values of channel `c` over time.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        let d = self.channels();
        self.values.data().iter().skip(c).step_by(d).copied().collect()
    }

    /// Observation times, falling back to step indices.
    pub fn times(&self) -> Vec<f64> {
        match &self.timestamps {
            Some(t) => t.clone(),
            None => (0..self.len()).map(|i| i as f64).collect(),
        }
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Split tags in file order: all train samples, then val, then test.
    pub fn tags(&self) -> Vec<Split> {
        let mut tags = vec![Split::Train; self.train];
        tags.extend(std::iter::repeat(Split::Val).take(self.val));
        tags.extend(std::iter::repeat(Split::Test).take(self.test));
        tags
    }
}

/// Per-channel mean and population standard deviation over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_hz: Option<f64>,
    pub splits: SplitCounts,
    /// Extra keys (e.g. the generating spec of a synthetic dataset).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct TimeSeriesDataset {
    samples: Vec<TimeSeriesSample>,
    splits: Vec<Split>,
    num_classes: Option<usize>,
    channels: usize,
    freq_hz: Option<f64>,
    stats: Vec<ChannelStats>,
    extra: serde_json::Map<String, serde_json::Value>,
}

impl TimeSeriesDataset {
    pub fn new(
        samples: Vec<TimeSeriesSample>,
        splits: Vec<Split>,
        num_classes: Option<usize>,
        freq_hz: Option<f64>,
    ) -> Result<Self> {
        if samples.len() != splits.len() {
            return Err(Error::Dataset(format!("{} split tags for {} samples", splits.len(), samples.len())));
        }
        let channels = samples.first().map_or(0, TimeSeriesSample::channels);
        for (i, s) in samples.iter().enumerate() {
            if s.channels() != channels {
                return Err(Error::Dataset(format!(
                    "sample {i} has {} channels, expected {channels}",
                    s.channels()
                )));
            }
            if let (Some(y), Some(c)) = (s.label, num_classes) {
                if y >= c {
                    return Err(Error::Dataset(format!("sample {i} label {y} outside [0, {c})")));
                }
            }
        }
        if let Some(f) = freq_hz {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Dataset(format!("sampling frequency must be positive, got {f}")));
            }
        }
        let stats = channel_stats(&samples, channels);
        Ok(Self {
            samples,
            splits,
            num_classes,
            channels,
            freq_hz,
            stats,
            extra: Default::default(),
        })
    }

    pub fn with_extra(mut self, key: &str, value: serde_json::Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    pub fn samples(&self) -> &[TimeSeriesSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &TimeSeriesSample {
        &self.samples[i]
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn freq_hz(&self) -> Option<f64> {
        self.freq_hz
    }

    pub fn channel_stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    /// Indices of the samples tagged `split`, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split_counts(&self) -> SplitCounts {
        let count = |s| self.splits.iter().filter(|&&x| x == s).count();
        SplitCounts::new(count(Split::Train), count(Split::Val), count(Split::Test))
    }

    /// Whether samples are stored grouped train → val → test.
    fn splits_in_file_order(&self) -> bool {
        self.splits.windows(2).all(|w| order(w[0]) <= order(w[1]))
    }

    /// A copy with every sample transformed by `f`.
    pub fn map_samples(&self, mut f: impl FnMut(usize, &TimeSeriesSample) -> Result<TimeSeriesSample>) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| f(i, s))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(samples, self.splits.clone(), self.num_classes, self.freq_hz)?;
        out.extra = self.extra.clone();
        Ok(out)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            channels: self.channels,
            classes: self.num_classes,
            freq_hz: self.freq_hz,
            splits: self.split_counts(),
            extra: self.extra.clone(),
        }
    }
}

fn order(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

fn channel_stats(samples: &[TimeSeriesSample], channels: usize) -> Vec<ChannelStats> {
    (0..channels)
        .map(|c| {
            let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
            for s in samples {
                for v in s.channel(c) {
                    n += 1;
                    sum += v;
                    sq += v * v;
                }
            }
            if n == 0 {
                return ChannelStats { mean: 0.0, std: 0.0 };
            }
            let mean = sum / n as f64;
            ChannelStats {
                mean,
                std: (sq / n as f64 - mean * mean).max(0.0).sqrt(),
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    values: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<Vec<f64>>,
}

/// Reads a dataset directory holding `meta.json` and `data.jsonl`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let dir = dir.as_ref();
    let meta_text = fs::read_to_string(dir.join("meta.json"))
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join("meta.json").display())))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Dataset(format!("meta.json: {e}")))?;
    if meta.channels == 0 {
        return Err(Error::Dataset("meta.json: channels must be positive".into()));
    }
    let file = fs::File::open(dir.join("data.jsonl"))
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join("data.jsonl").display())))?;
    let mut samples = Vec::with_capacity(meta.splits.total());
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(&line, line_no, &meta)?);
    }
    if samples.len() != meta.splits.total() {
        return Err(Error::Dataset(format!(
            "data.jsonl has {} samples but meta.json splits sum to {}",
            samples.len(),
            meta.splits.total()
        )));
    }
    let mut ds = TimeSeriesDataset::new(samples, meta.splits.tags(), meta.classes, meta.freq_hz)?;
    ds.extra = meta.extra;
    Ok(ds)
}

fn parse_record(line: &str, line_no: usize, meta: &DatasetMeta) -> Result<TimeSeriesSample> {
    let err = |msg: String| Error::Data { line: line_no, msg };
    let rec: SampleRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let d = meta.channels;
    if let Some(r) = rec.values.iter().position(|row| row.len() != d) {
        return Err(err(format!("row {r} has {} channels, expected {d}", rec.values[r].len())));
    }
    let label = match rec.label {
        None => None,
        Some(y) => {
            let classes = meta.classes.ok_or_else(|| err("labelled sample but meta.json declares no classes".into()))?;
            if y < 0 || y as usize >= classes {
                return Err(err(format!("label {y} outside [0, {classes})")));
            }
            Some(y as usize)
        }
    };
    let len = rec.values.len();
    let values = Tensor::new([len.max(1), d], rec.values.into_iter().flatten().collect())
        .map_err(|e| err(e.to_string()))?;
    TimeSeriesSample::new(values, rec.t, label).map_err(|e| err(e.to_string()))
}

/// Writes `meta.json` and `data.jsonl`. Samples must be grouped by split.
pub fn save_dataset(dataset: &TimeSeriesDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if !dataset.splits_in_file_order() {
        return Err(Error::Dataset("samples must be ordered train, val, test to be saved".into()));
    }
    fs::create_dir_all(dir)?;
    let meta = serde_json::to_string_pretty(&dataset.meta())?;
    fs::write(dir.join("meta.json"), meta + "\n")?;
    let mut out = BufWriter::new(fs::File::create(dir.join("data.jsonl"))?);
    for s in &dataset.samples {
        let d = s.channels();
        let rec = SampleRecord {
            values: s.values.data().chunks(d).map(<[f64]>::to_vec).collect(),
            label: s.label.map(|y| y as i64),
            t: s.timestamps.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Interpolates a sample onto `target_len` equispaced points spanning its
/// first to last observation time, channel by channel.
pub fn resample_uniform(
    sample: &TimeSeriesSample,
    target_len: usize,
    method: Interpolation,
) -> Result<TimeSeriesSample> {
    if target_len < MIN_LENGTH {
        return Err(Error::invalid("resample", format!("target length {target_len} below {MIN_LENGTH}")));
    }
    let times = sample.times();
    let grid = spline::uniform_grid(times[0], times[times.len() - 1], target_len);
    let d = sample.channels();
    let mut data = vec![0.0; target_len * d];
    for c in 0..d {
        let col = spline::interpolate(&times, &sample.channel(c), &grid, method)?;
        for (t, v) in col.into_iter().enumerate() {
            data[t * d + c] = v;
        }
    }
    TimeSeriesSample::new(Tensor::new([target_len, d], data)?, Some(grid), sample.label)
}

/// Removes each observation independently with probability `fraction`,
/// keeping the timestamps of the survivors.
pub fn drop_observations(sample: &TimeSeriesSample, fraction: f64, seed: u64) -> Result<TimeSeriesSample> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("drop_observations", format!("fraction {fraction} outside [0, 1)")));
    }
    let len = sample.len();
    if ((1.0 - fraction) * len as f64) < MIN_LENGTH as f64 {
        return Err(Error::invalid(
            "drop_observations",
            format!("expected survivors {:.1} below {MIN_LENGTH}", (1.0 - fraction) * len as f64),
        ));
    }
    let mut r = rng::stream(seed, &[rng::tag::DROP]);
    let keep: Vec<usize> = (0..len).filter(|_| r.gen::<f64>() >= fraction).collect();
    if keep.len() < MIN_LENGTH {
        return Err(Error::invalid(
            "drop_observations",
            format!("only {} observations survived", keep.len()),
        ));
    }
    let times = sample.times();
    let d = sample.channels();
    let data: Vec<f64> = keep
        .iter()
        .flat_map(|&t| sample.values.data()[t * d..(t + 1) * d].iter().copied())
        .collect();
    TimeSeriesSample::new(
        Tensor::new([keep.len(), d], data)?,
        Some(keep.iter().map(|&t| times[t]).collect()),
        sample.label,
    )
}

/// Per-channel z-score with population statistics; flat channels map to 0.
pub fn normalize(sample: &TimeSeriesSample) -> TimeSeriesSample {
    let (len, d) = (sample.len(), sample.channels());
    let mut data = sample.values.data().to_vec();
    for c in 0..d {
        let col = sample.channel(c);
        let mean = col.iter().sum::<f64>() / len as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let std = var.sqrt();
        let flat = std <= 1e-12 * mean.abs().max(1.0);
        for t in 0..len {
            data[t * d + c] = if flat { 0.0 } else { (col[t] - mean) / std };
        }
    }
    TimeSeriesSample {
        values: Tensor::from_parts(vec![len, d], data),
        timestamps: sample.timestamps.clone(),
        label: sample.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> TimeSeriesSample {
        TimeSeriesSample::from_channels(&[values.to_vec()], None).unwrap()
    }

    #[test]
    fn sample_invariants() {
        assert!(TimeSeriesSample::from_channels(&[vec![1.0, 2.0]], None).is_err());
        let v = Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(TimeSeriesSample::new(v.clone(), Some(vec![0.0, 1.0, 1.0]), None).is_err());
        assert!(TimeSeriesSample::new(v.clone(), Some(vec![0.0, 1.0]), None).is_err());
        assert!(TimeSeriesSample::new(v, Some(vec![0.0, 0.5, 1.0]), Some(1)).is_ok());
    }

    #[test]
    fn from_channels_interleaves_rows() {
        let s = TimeSeriesSample::from_channels(&[vec![1., 2., 3.], vec![4., 5., 6.]], None).unwrap();
        assert_eq!(s.values().data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(s.channel(1), vec![4., 5., 6.]);
    }

    #[test]
    fn normalize_cases() {
        let z = normalize(&series(&[1., 2., 3.]));
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z.values().data()[0] + expect).abs() < 1e-12);
        assert_eq!(z.values().data()[1], 0.0);
        assert!((z.values().data()[2] - 1.224_744_871_391_589).abs() < 1e-12);
        let flat = normalize(&series(&[4., 4., 4., 4.]));
        assert!(flat.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_rejects_mixed_channels_and_bad_labels() {
        let one = series(&[1., 2., 3.]);
        let two = TimeSeriesSample::from_channels(&[vec![1., 2., 3.], vec![1., 2., 3.]], None).unwrap();
        assert!(TimeSeriesDataset::new(vec![one.clone(), two], vec![Split::Train; 2], None, None).is_err());
        let labelled = one.with_label(Some(3));
        assert!(TimeSeriesDataset::new(vec![labelled], vec![Split::Train], Some(2), None).is_err());
    }

    #[test]
    fn drop_zero_fraction_is_identity_on_values() {
        let s = series(&[1., 5., 2., 8., 3.]);
        let d = drop_observations(&s, 0.0, 9).unwrap();
        assert_eq!(d.values(), s.values());
        assert_eq!(d.timestamps().unwrap(), &[0., 1., 2., 3., 4.]);
    }

    #[test]
    fn drop_guard_is_deterministic() {
        let s = series(&(0..100).map(f64::from).collect::<Vec<_>>());
        for seed in 0..20 {
            assert!(drop_observations(&s, 0.99, seed).is_err());
        }
        assert!(drop_observations(&s, 1.0, 0).is_err());
    }

    #[test]
    fn channel_stats_are_cached() {
        let ds = TimeSeriesDataset::new(
            vec![series(&[1., 1., 1.]), series(&[3., 3., 3.])],
            vec![Split::Train, Split::Test],
            None,
            None,
        )
        .unwrap();
        assert_eq!(ds.channel_stats()[0], ChannelStats { mean: 2.0, std: 1.0 });
        assert_eq!(ds.indices(Split::Test), vec![1]);
    }
}
