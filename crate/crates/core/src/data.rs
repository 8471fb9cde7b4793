//! Datasets, split protocols, look-back windows and patching.

use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower bound applied to a channel's train-split standard deviation.
pub const STD_GUARD: f64 = 1e-8;

const HOURS_PER_MONTH: usize = 30 * 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// How rows are divided into train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitProtocol {
    /// 12 / 4 / 4 months of hourly rows.
    EttHourly,
    /// 12 / 4 / 4 months of 15-minute rows.
    EttMinute,
    /// Fractions of the series for train and test; validation gets the rest.
    Ratio { train: f64, test: f64 },
}

impl SplitProtocol {
    /// ETT files get the fixed-month protocol, everything else 0.7 / 0.1 / 0.2.
    pub fn for_name(name: &str) -> Self {
        if name.starts_with("ETTh") {
            SplitProtocol::EttHourly
        } else if name.starts_with("ETTm") {
            SplitProtocol::EttMinute
        } else {
            SplitProtocol::Ratio { train: 0.7, test: 0.2 }
        }
    }
}

/// Half-open row ranges. Validation and test ranges start `seq_len` rows
/// before their first target row so the first window's look-back is
/// available; targets never leave their own split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Borders {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl Borders {
    pub fn compute(protocol: SplitProtocol, len: usize, seq_len: usize) -> Result<Self> {
        let (n_train, n_val, n_test) = match protocol {
            SplitProtocol::EttHourly | SplitProtocol::EttMinute => {
                let per_month = if protocol == SplitProtocol::EttHourly {
                    HOURS_PER_MONTH
                } else {
                    HOURS_PER_MONTH * 4
                };
                let needed = 20 * per_month;
                if len < needed {
                    return Err(Error::Size(format!(
                        "ETT protocol needs {needed} rows, file has {len}"
                    )));
                }
                (12 * per_month, 4 * per_month, 4 * per_month)
            }
            SplitProtocol::Ratio { train, test } => {
                let n_train = (len as f64 * train) as usize;
                let n_test = (len as f64 * test) as usize;
                (n_train, len - n_train - n_test, n_test)
            }
        };
        if n_train < seq_len {
            return Err(Error::Size(format!(
                "train split has {n_train} rows, look-back needs {seq_len}"
            )));
        }
        let val_end = n_train + n_val;
        Ok(Borders {
            train: (0, n_train),
            val: (n_train - seq_len, val_end),
            test: (val_end - seq_len, val_end + n_test),
        })
    }

    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub seq_len: usize,
    pub pred_len: usize,
    pub protocol: SplitProtocol,
    /// Name of an integer class column; required for classification.
    pub label_column: Option<String>,
}

impl DatasetSpec {
    pub fn forecasting(name: &str, seq_len: usize, pred_len: usize) -> Self {
        DatasetSpec {
            name: name.to_string(),
            seq_len,
            pred_len,
            protocol: SplitProtocol::for_name(name),
            label_column: None,
        }
    }

    pub fn classification(name: &str, seq_len: usize, label_column: &str) -> Self {
        DatasetSpec {
            name: name.to_string(),
            seq_len,
            pred_len: 0,
            protocol: SplitProtocol::for_name(name),
            label_column: Some(label_column.to_string()),
        }
    }
}

/// A standardized multivariate series. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub len: usize,
    /// `len x channels`, row-major, already z-scored with train statistics.
    values: Vec<f64>,
    labels: Option<Vec<usize>>,
    pub borders: Borders,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Horizon(Vec<f64>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub channel: usize,
    /// Row index of the first look-back point.
    pub start: usize,
    pub x: Vec<f64>,
    pub target: Target,
}

impl Dataset {
    /// Builds a dataset from raw `len x channels` rows, computing the split
    /// borders and standardizing every channel by its train-split mean and
    /// population standard deviation.
    pub fn from_raw(
        spec: &DatasetSpec,
        channels: usize,
        mut values: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if channels == 0 || values.is_empty() || !values.len().is_multiple_of(channels) {
            return Err(Error::Size(format!("{} values for {channels} channels", values.len())));
        }
        let len = values.len() / channels;
        if len < spec.seq_len + spec.pred_len {
            return Err(Error::Size(format!(
                "{len} rows, need at least look-back + horizon = {}",
                spec.seq_len + spec.pred_len
            )));
        }
        let borders = Borders::compute(spec.protocol, len, spec.seq_len)?;
        let (t0, t1) = borders.train;
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let column = (t0..t1).map(|r| values[r * channels + c]);
            let m = column.clone().sum::<f64>() / (t1 - t0) as f64;
            let var = column.map(|v| (v - m) * (v - m)).sum::<f64>() / (t1 - t0) as f64;
            mean[c] = m;
            std[c] = var.sqrt().max(STD_GUARD);
        }
        for row in values.chunks_mut(channels) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[c]) / std[c];
            }
        }
        Ok(Dataset {
            name: spec.name.clone(),
            channels,
            len,
            values,
            labels,
            borders,
            mean,
            std,
        })
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels + channel]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// One channel's values over `start..start + len`.
    pub fn slice(&self, channel: usize, start: usize, len: usize) -> Vec<f64> {
        (start..start + len).map(|r| self.value(r, channel)).collect()
    }

    /// Start rows of every window whose look-back and horizon fit in `split`.
    pub fn positions(&self, split: Split, seq_len: usize, pred_len: usize) -> Vec<usize> {
        let (lo, hi) = self.borders.range(split);
        if hi - lo < seq_len + pred_len {
            warn!(
                "{} split of {} has {} rows, fewer than look-back + horizon = {}; no windows",
                split.name(),
                self.name,
                hi - lo,
                seq_len + pred_len
            );
            return Vec::new();
        }
        (lo..=hi - seq_len - pred_len).collect()
    }

    /// Builds the sample for one channel at one start row.
    pub fn window(&self, start: usize, channel: usize, seq_len: usize, pred_len: usize) -> WindowSample {
        let x = self.slice(channel, start, seq_len);
        let target = match &self.labels {
            Some(labels) if pred_len == 0 => Target::Class(labels[start + seq_len - 1]),
            _ => Target::Horizon(self.slice(channel, start + seq_len, pred_len)),
        };
        WindowSample {
            channel,
            start,
            x,
            target,
        }
    }

    /// Channel-independent windows of a split with stride 1, position-major
    /// and channel-minor.
    pub fn sample_windows(
        &self,
        split: Split,
        seq_len: usize,
        pred_len: usize,
    ) -> impl Iterator<Item = WindowSample> + '_ {
        self.positions(split, seq_len, pred_len).into_iter().flat_map(move |start| {
            (0..self.channels).map(move |c| self.window(start, c, seq_len, pred_len))
        })
    }

    /// Training order: positions shuffled by `rng`, each followed by all of
    /// its channels.
    pub fn shuffled_positions(&self, split: Split, seq_len: usize, pred_len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut positions = self.positions(split, seq_len, pred_len);
        rng.shuffle(&mut positions);
        positions
    }
}

/// Reads a CSV file: one header row, an optional leading `date` column that
/// is skipped, every other column numeric. Rows in errors are 1-based data
/// rows (the header is not counted); columns are 1-based file columns.
pub fn load_csv(path: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, spec)
}

pub fn read_csv(reader: impl std::io::Read, spec: &DatasetSpec) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: 0,
            message: e.to_string(),
        })?
        .clone();
    let skip_first = headers.get(0).is_some_and(|h| h.trim().eq_ignore_ascii_case("date"));
    let label_col = match &spec.label_column {
        Some(name) => Some(headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: 0,
            message: format!("label column `{name}` not in header"),
        })?),
        None => None,
    };
    let channel_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| !(skip_first && c == 0) && Some(c) != label_col)
        .collect();
    if channel_cols.is_empty() {
        return Err(Error::Size("no numeric channel columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        for &c in &channel_cols {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("`{cell}` is not finite"),
                });
            }
            values.push(v);
        }
        if let (Some(c), Some(labels)) = (label_col, labels.as_mut()) {
            let cell = record.get(c).unwrap_or("").trim();
            let v: usize = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("`{cell}` is not a class index"),
            })?;
            labels.push(v);
        }
    }
    Dataset::from_raw(spec, channel_cols.len(), values, labels)
}

/// Number of patches for look-back `seq_len`, patch length and stride.
pub fn patch_count(seq_len: usize, patch_len: usize, stride: usize) -> usize {
    (seq_len - patch_len) / stride + 2
}

/// Patched view of one look-back window.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `n x patch_len`, row-major.
    pub patches: Vec<f64>,
    pub n: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub pad_count: usize,
    pub seq_len: usize,
}

impl PatchSet {
    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }

    /// Recovers the original `seq_len` points; overlapping positions are read
    /// from the first patch that covers them.
    pub fn unpatchify(&self) -> Vec<f64> {
        unpatchify_values(&self.patches, self.patch_len, self.stride, self.seq_len)
    }
}

/// Reads a length-`seq_len` series back out of `n x patch_len` values.
pub fn unpatchify_values(patches: &[f64], patch_len: usize, stride: usize, seq_len: usize) -> Vec<f64> {
    (0..seq_len)
        .map(|t| {
            let n = (t / stride).min(patches.len() / patch_len - 1);
            patches[n * patch_len + t - n * stride]
        })
        .collect()
}

/// Splits `x` into overlapping patches, padding the end with copies of the
/// last value so that the final patch is complete.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<PatchSet> {
    let seq_len = x.len();
    if patch_len == 0 || patch_len > seq_len {
        return Err(Error::Size(format!("patch length {patch_len} for a series of {seq_len} points")));
    }
    if stride == 0 || stride > patch_len {
        return Err(Error::Contract(format!("stride {stride} must be in 1..={patch_len}")));
    }
    let n = patch_count(seq_len, patch_len, stride);
    let padded_len = (n - 1) * stride + patch_len;
    let pad_count = padded_len - seq_len;
    let last = x[seq_len - 1];
    let padded: Vec<f64> = x.iter().copied().chain(std::iter::repeat_n(last, pad_count)).collect();
    let mut patches = Vec::with_capacity(n * patch_len);
    for i in 0..n {
        patches.extend_from_slice(&padded[i * stride..i * stride + patch_len]);
    }
    Ok(PatchSet {
        patches,
        n,
        patch_len,
        stride,
        pad_count,
        seq_len,
    })
}

/// Built-in deterministic datasets, addressed as `synthetic:<variant>`.
pub mod synthetic {
    use super::*;

    /// Sum of a daily-like and a slower sinusoid per channel, each with its
    /// own amplitude and phase, plus white Gaussian noise.
    pub fn sine_noise(channels: usize, len: usize, periods: (f64, f64), noise: f64, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        let params: Vec<(f64, f64, f64, f64)> = (0..channels)
            .map(|_| {
                (
                    rng.uniform(0.8, 1.5),
                    rng.uniform(0.0, std::f64::consts::TAU),
                    rng.uniform(0.3, 0.8),
                    rng.uniform(0.0, std::f64::consts::TAU),
                )
            })
            .collect();
        let mut values = Vec::with_capacity(len * channels);
        for t in 0..len {
            for &(a1, p1, a2, p2) in &params {
                let tt = t as f64;
                let v = a1 * (std::f64::consts::TAU * tt / periods.0 + p1).sin()
                    + a2 * (std::f64::consts::TAU * tt / periods.1 + p2).sin()
                    + noise * rng.normal();
                values.push(v);
            }
        }
        values
    }

    /// Alternating segments of rising and falling ramps with noise; the
    /// label column holds 0 for rising rows and 1 for falling rows.
    pub fn ramps(channels: usize, len: usize, segment: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut values = Vec::with_capacity(len * channels);
        let mut labels = Vec::with_capacity(len);
        for t in 0..len {
            let seg = t / segment;
            let label = seg % 2;
            let phase = (t % segment) as f64 / segment as f64;
            let level = if label == 0 { phase } else { 1.0 - phase };
            for c in 0..channels {
                values.push(4.0 * level + 0.1 * c as f64 + 0.05 * rng.normal());
            }
            labels.push(label);
        }
        (values, labels)
    }

    /// Resolves a `synthetic:<variant>` dataset.
    /// * `sine`: 3 channels, 5000 rows, periods 24 and 96, noise 0.3.
    /// * `sine-b`: 2 channels, 4000 rows, periods 36 and 120, noise 0.2.
    /// * `ramps`: 2 channels, 6000 rows with a `label` column, segment 200.
    pub fn load(variant: &str, spec: &DatasetSpec) -> Result<Dataset> {
        match variant {
            "sine" => Dataset::from_raw(spec, 3, sine_noise(3, 5000, (24.0, 96.0), 0.3, 2024), None),
            "sine-b" => Dataset::from_raw(spec, 2, sine_noise(2, 4000, (36.0, 120.0), 0.2, 7), None),
            "ramps" => {
                let (values, labels) = ramps(2, 6000, 200, 11);
                Dataset::from_raw(spec, 2, values, Some(labels))
            }
            other => Err(Error::config("dataset_path", format!("unknown synthetic dataset `{other}`"))),
        }
    }
}
