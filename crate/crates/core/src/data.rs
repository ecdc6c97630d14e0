//! Dataset ingestion, chronological splitting, normalization, and
//! sliding-window batch construction.

use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDateTime, TimeZone, Utc};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const SECS_PER_DAY: i64 = 86_400;

/// A regular multivariate series: `T x N` base-channel values at strictly
/// increasing, evenly spaced timestamps. Missing observations carry a zero
/// value and a zero mask bit.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    node_names: Vec<String>,
    timestamps: Vec<i64>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl TimeSeriesDataset {
    pub fn new(
        node_names: Vec<String>,
        timestamps: Vec<i64>,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = node_names.len();
        let t = timestamps.len();
        if n == 0 {
            return Err(CoreError::data("dataset has zero nodes"));
        }
        if values.len() != t * n || mask.len() != t * n {
            return Err(CoreError::data(format!(
                "expected {} values for {} steps x {} nodes",
                t * n,
                t,
                n
            )));
        }
        validate_timestamps(&timestamps)?;
        Ok(TimeSeriesDataset {
            node_names,
            timestamps,
            values,
            mask,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    /// Spacing between consecutive steps, in seconds.
    pub fn interval(&self) -> i64 {
        if self.timestamps.len() < 2 {
            0
        } else {
            self.timestamps[1] - self.timestamps[0]
        }
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.values[step * self.num_nodes() + node]
    }

    pub fn is_valid(&self, step: usize, node: usize) -> bool {
        self.mask[step * self.num_nodes() + node]
    }
}

fn validate_timestamps(timestamps: &[i64]) -> Result<()> {
    if timestamps.len() < 2 {
        return Ok(());
    }
    let step = timestamps[1] - timestamps[0];
    if step <= 0 {
        return Err(CoreError::data("timestamps are not strictly increasing"));
    }
    for (i, pair) in timestamps.windows(2).enumerate() {
        if pair[1] - pair[0] != step {
            return Err(CoreError::data_at(
                i + 3, // header + 1-based + offending second row
                format!(
                    "irregular time spacing: expected {} got {}",
                    step,
                    pair[1] - pair[0]
                ),
            ));
        }
    }
    Ok(())
}

fn parse_timestamp(raw: &str, line: usize) -> Result<i64> {
    let raw = raw.trim();
    if let Ok(epoch) = raw.parse::<i64>() {
        return Ok(epoch);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(Utc.from_utc_datetime(&naive).timestamp());
        }
    }
    Err(CoreError::data_at(
        line,
        format!("unparseable timestamp {raw:?}"),
    ))
}

/// Loads a dataset from CSV: a header row naming the timestamp column and
/// the N nodes, then one row per step. Timestamps are ISO-8601 or epoch
/// seconds; empty cells mark missing observations.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| CoreError::data(format!("{}: {e}", path.as_ref().display())))?;

    let headers = reader
        .headers()
        .map_err(|e| CoreError::data_at(1, e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(CoreError::data_at(1, "header names zero nodes"));
    }
    let node_names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2; // 1-based, after header
        let record = record.map_err(|e| CoreError::data_at(line, e.to_string()))?;
        let ts = parse_timestamp(&record[0], line)?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(CoreError::data_at(
                    line,
                    format!("timestamp {ts} not after previous {prev}"),
                ));
            }
        }
        timestamps.push(ts);
        for cell in record.iter().skip(1) {
            if cell.is_empty() {
                values.push(0.0);
                mask.push(false);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| CoreError::data_at(line, format!("bad number {cell:?}")))?;
                if !v.is_finite() {
                    return Err(CoreError::data_at(line, format!("non-finite value {cell:?}")));
                }
                values.push(v);
                mask.push(true);
            }
        }
    }

    TimeSeriesDataset::new(node_names, timestamps, values, mask)
}

/// Writes a dataset back to the CSV format accepted by [`load_csv`].
/// Timestamps are emitted as epoch seconds and missing cells as empty.
pub fn save_csv(dataset: &TimeSeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())
        .map_err(|e| CoreError::data(format!("{}: {e}", path.as_ref().display())))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(dataset.node_names.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| CoreError::data(e.to_string()))?;
    for step in 0..dataset.num_steps() {
        let mut row = vec![dataset.timestamps[step].to_string()];
        for node in 0..dataset.num_nodes() {
            if dataset.is_valid(step, node) {
                row.push(format!("{}", dataset.value(step, node)));
            } else {
                row.push(String::new());
            }
        }
        writer
            .write_record(&row)
            .map_err(|e| CoreError::data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Chronological step ranges of the 70/10/20 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Splits by time steps: floor(0.7 T) train, floor(0.1 T) validation, the
/// remainder test. Windows are built per split, so no window straddles a
/// boundary.
pub fn split(dataset: &TimeSeriesDataset) -> Result<SplitRanges> {
    let t = dataset.num_steps();
    if t < 10 {
        return Err(CoreError::data(format!(
            "need at least 10 steps to split, got {t}"
        )));
    }
    let train = (t * 7) / 10;
    let val = t / 10;
    Ok(SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..t,
    })
}

/// Base-channel normalizer fitted on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    /// Mean and standard deviation over the valid entries of `range`.
    pub fn fit(dataset: &TimeSeriesDataset, range: Range<usize>) -> Result<Scaler> {
        let mut count = 0usize;
        let mut sum = 0.0;
        for step in range.clone() {
            for node in 0..dataset.num_nodes() {
                if dataset.is_valid(step, node) {
                    sum += dataset.value(step, node);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(CoreError::data("no valid observations to fit scaler"));
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for step in range {
            for node in 0..dataset.num_nodes() {
                if dataset.is_valid(step, node) {
                    let d = dataset.value(step, node) - mean;
                    ss += d * d;
                }
            }
        }
        // Keep std strictly positive so transform stays invertible.
        let std = (ss / count as f64).sqrt().max(1e-12);
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.history < 2 || self.horizon < 1 || self.stride < 1 {
            return Err(CoreError::InvalidConfig(format!(
                "window spec requires h >= 2, f >= 1, stride >= 1, got h = {}, f = {}, stride = {}",
                self.history, self.horizon, self.stride
            )));
        }
        Ok(())
    }

    /// Number of windows a split of `len` steps yields.
    pub fn count(&self, len: usize) -> usize {
        let need = self.history + self.horizon;
        if len < need {
            0
        } else {
            (len - need) / self.stride + 1
        }
    }
}

/// Input covariate channels appended to the scaled base channel.
#[derive(Debug, Clone, Copy)]
pub struct CovariateSpec {
    pub time_of_day: bool,
    pub day_of_week: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec {
            time_of_day: true,
            day_of_week: false,
        }
    }
}

impl CovariateSpec {
    pub fn in_channels(&self) -> usize {
        1 + usize::from(self.time_of_day) + usize::from(self.day_of_week)
    }
}

/// A batch of model-ready windows.
///
/// `inputs` are `[B, h, N, C_in]` (scaled value plus covariates), `targets`
/// are `[B, f, N, 1]` in original units, `mask` is `[B, f, N]` with ones at
/// supervised positions. `start_timestamps` holds each window's first
/// history timestamp.
#[derive(Debug, Clone)]
pub struct ForecastBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Tensor,
    pub start_timestamps: Vec<i64>,
}

impl ForecastBatch {
    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

fn time_of_day(ts: i64) -> f64 {
    ts.rem_euclid(SECS_PER_DAY) as f64 / SECS_PER_DAY as f64
}

fn day_of_week(ts: i64) -> f64 {
    // 1970-01-01 was a Thursday; index days with Thursday = 4 so that
    // Sunday = 0.
    ((ts.div_euclid(SECS_PER_DAY) + 4).rem_euclid(7)) as f64 / 7.0
}

/// Builds batched sliding windows over one split range.
///
/// Inputs carry the scaled base channel (missing entries sit at the scaled
/// mean, i.e. zero) plus the requested covariates; targets stay in original
/// units and masked-out positions contribute nothing to losses or metrics.
pub fn make_windows(
    dataset: &TimeSeriesDataset,
    range: Range<usize>,
    spec: WindowSpec,
    scaler: &Scaler,
    covariates: CovariateSpec,
    batch_size: usize,
) -> Result<Vec<ForecastBatch>> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(CoreError::InvalidConfig("batch size must be >= 1".into()));
    }
    let len = range.len();
    if len < spec.history + spec.horizon {
        return Err(CoreError::data(format!(
            "split of {len} steps is shorter than h + f = {}",
            spec.history + spec.horizon
        )));
    }

    let n = dataset.num_nodes();
    let c_in = covariates.in_channels();
    let window_count = spec.count(len);
    let starts: Vec<usize> = (0..window_count)
        .map(|w| range.start + w * spec.stride)
        .collect();

    let mut batches = Vec::with_capacity(starts.len().div_ceil(batch_size));
    for chunk in starts.chunks(batch_size) {
        let b = chunk.len();
        let mut inputs = Tensor::zeros(&[b, spec.history, n, c_in]);
        let mut targets = Tensor::zeros(&[b, spec.horizon, n, 1]);
        let mut mask = Tensor::zeros(&[b, spec.horizon, n]);
        let mut start_timestamps = Vec::with_capacity(b);

        for (wi, &start) in chunk.iter().enumerate() {
            start_timestamps.push(dataset.timestamps[start]);
            for t in 0..spec.history {
                let step = start + t;
                let ts = dataset.timestamps[step];
                for node in 0..n {
                    let base = ((wi * spec.history + t) * n + node) * c_in;
                    let data = inputs.data_mut();
                    data[base] = if dataset.is_valid(step, node) {
                        scaler.transform(dataset.value(step, node))
                    } else {
                        0.0
                    };
                    let mut ch = 1;
                    if covariates.time_of_day {
                        data[base + ch] = time_of_day(ts);
                        ch += 1;
                    }
                    if covariates.day_of_week {
                        data[base + ch] = day_of_week(ts);
                    }
                }
            }
            for t in 0..spec.horizon {
                let step = start + spec.history + t;
                for node in 0..n {
                    let idx = (wi * spec.horizon + t) * n + node;
                    if dataset.is_valid(step, node) {
                        targets.data_mut()[idx] = dataset.value(step, node);
                        mask.data_mut()[idx] = 1.0;
                    }
                }
            }
        }

        batches.push(ForecastBatch {
            inputs,
            targets,
            mask,
            start_timestamps,
        });
    }
    Ok(batches)
}

/// Builds a single inference window from the last `history` steps of the
/// dataset: inputs only, with placeholder targets of the requested horizon
/// (prediction never reads them).
pub fn make_inference_window(
    dataset: &TimeSeriesDataset,
    history: usize,
    horizon: usize,
    scaler: &Scaler,
    covariates: CovariateSpec,
) -> Result<ForecastBatch> {
    let t = dataset.num_steps();
    if t < history {
        return Err(CoreError::data(format!(
            "history of {t} steps is shorter than required h = {history}"
        )));
    }
    let n = dataset.num_nodes();
    let c_in = covariates.in_channels();
    let start = t - history;
    let mut inputs = Tensor::zeros(&[1, history, n, c_in]);
    for step_off in 0..history {
        let step = start + step_off;
        let ts = dataset.timestamps[step];
        for node in 0..n {
            let base = (step_off * n + node) * c_in;
            let data = inputs.data_mut();
            data[base] = if dataset.is_valid(step, node) {
                scaler.transform(dataset.value(step, node))
            } else {
                0.0
            };
            let mut ch = 1;
            if covariates.time_of_day {
                data[base + ch] = time_of_day(ts);
                ch += 1;
            }
            if covariates.day_of_week {
                data[base + ch] = day_of_week(ts);
            }
        }
    }
    Ok(ForecastBatch {
        inputs,
        targets: Tensor::zeros(&[1, horizon, n, 1]),
        mask: Tensor::zeros(&[1, horizon, n]),
        start_timestamps: vec![dataset.timestamps[start]],
    })
}

/// Copies time step `t` out of a `[B, T, N, C]` tensor as `[B, N, C]`.
pub fn time_slice(x: &Tensor, t: usize) -> Tensor {
    let s = x.shape();
    debug_assert_eq!(s.len(), 4);
    let (b, steps, n, c) = (s[0], s[1], s[2], s[3]);
    debug_assert!(t < steps);
    let mut out = Tensor::zeros(&[b, n, c]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        let from = ((bi * steps) + t) * n * c;
        let to = bi * n * c;
        dst[to..to + n * c].copy_from_slice(&src[from..from + n * c]);
    }
    out
}
