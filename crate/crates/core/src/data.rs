//! Value types shared by the rest of the crate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NilmError, Result};

/// Uniformly sampled power readings in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    start_epoch: i64,
    step: u32,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(start_epoch: i64, step: u32, values: Vec<f64>) -> Result<Self> {
        if step == 0 {
            return Err(NilmError::InvalidSeries("step must be positive".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NilmError::InvalidSeries(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self {
            start_epoch,
            step,
            values,
        })
    }

    pub fn start_epoch(&self) -> i64 {
        self.start_epoch
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn epoch_at(&self, index: usize) -> i64 {
        self.start_epoch + index as i64 * self.step as i64
    }

    /// Epoch one step past the last sample.
    pub fn end_epoch(&self) -> i64 {
        self.epoch_at(self.values.len())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sub-series over `range` of sample indices.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TimeSeries {
        TimeSeries {
            start_epoch: self.epoch_at(range.start),
            step: self.step,
            values: self.values[range].to_vec(),
        }
    }

    /// Same values on a different grid; used where only the sample values matter.
    pub fn with_values(&self, values: Vec<f64>) -> Result<TimeSeries> {
        TimeSeries::new(self.start_epoch, self.step, values)
    }

    pub fn is_aligned_with(&self, other: &TimeSeries) -> bool {
        self.start_epoch == other.start_epoch
            && self.step == other.step
            && self.values.len() == other.values.len()
    }
}

/// Appliance category. The four named kinds are the flexibility-eligible set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum ApplianceKind {
    Refrigerator,
    ElectricHeater,
    WasherDryer,
    Dishwasher,
    Other(String),
}

impl ApplianceKind {
    pub const FLEXIBLE: [ApplianceKind; 4] = [
        ApplianceKind::Refrigerator,
        ApplianceKind::ElectricHeater,
        ApplianceKind::WasherDryer,
        ApplianceKind::Dishwasher,
    ];

    /// Maps a raw REDD channel label. REDD spells the dishwasher `dishwaser`
    /// and the heater `electric_heat`.
    pub fn from_label(label: &str) -> ApplianceKind {
        match label.trim().to_ascii_lowercase().as_str() {
            "refrigerator" | "fridge" => ApplianceKind::Refrigerator,
            "electric_heat" | "electric_heater" | "heater" => ApplianceKind::ElectricHeater,
            "washer_dryer" | "washer-dryer" | "washerdryer" => ApplianceKind::WasherDryer,
            "dishwasher" | "dishwaser" => ApplianceKind::Dishwasher,
            other => ApplianceKind::Other(other.to_string()),
        }
    }

    pub fn is_flexible(&self) -> bool {
        !matches!(self, ApplianceKind::Other(_))
    }

    pub fn name(&self) -> &str {
        match self {
            ApplianceKind::Refrigerator => "refrigerator",
            ApplianceKind::ElectricHeater => "electric_heater",
            ApplianceKind::WasherDryer => "washer_dryer",
            ApplianceKind::Dishwasher => "dishwasher",
            ApplianceKind::Other(label) => label,
        }
    }
}

impl fmt::Display for ApplianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ApplianceKind {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(ApplianceKind::from_label(s))
    }
}

impl From<ApplianceKind> for String {
    fn from(kind: ApplianceKind) -> String {
        kind.name().to_string()
    }
}

impl From<String> for ApplianceKind {
    fn from(s: String) -> Self {
        ApplianceKind::from_label(&s)
    }
}

/// How on/off ground truth is derived from an appliance power channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPolicy {
    pub on_threshold_watts: f64,
    pub min_on_duration_steps: usize,
}

impl LabelPolicy {
    pub fn new(on_threshold_watts: f64, min_on_duration_steps: usize) -> Result<Self> {
        let policy = Self {
            on_threshold_watts,
            min_on_duration_steps,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.on_threshold_watts.is_finite() && self.on_threshold_watts > 0.0) {
            return Err(NilmError::InvalidParameter(format!(
                "on threshold must be positive, got {}",
                self.on_threshold_watts
            )));
        }
        if self.min_on_duration_steps == 0 {
            return Err(NilmError::InvalidParameter(
                "minimum on duration must be at least one step".into(),
            ));
        }
        Ok(())
    }

    /// Default thresholds sit between standby and active draw.
    pub fn default_for(kind: &ApplianceKind) -> Self {
        let on_threshold_watts = match kind {
            ApplianceKind::Refrigerator => 50.0,
            ApplianceKind::ElectricHeater => 20.0,
            ApplianceKind::WasherDryer => 20.0,
            ApplianceKind::Dishwasher => 10.0,
            ApplianceKind::Other(_) => 15.0,
        };
        Self {
            on_threshold_watts,
            min_on_duration_steps: 1,
        }
    }
}

/// Binary on/off labels. A sample is on when it lies in a run of at least
/// `min_on_duration_steps` consecutive samples strictly above the threshold.
pub fn label_activation(appliance: &TimeSeries, policy: &LabelPolicy) -> Vec<u8> {
    let values = appliance.values();
    let mut out = vec![0u8; values.len()];
    let mut run_start = None;
    for t in 0..=values.len() {
        let above = t < values.len() && values[t] > policy.on_threshold_watts;
        match (above, run_start) {
            (true, None) => run_start = Some(t),
            (false, Some(start)) => {
                if t - start >= policy.min_on_duration_steps {
                    out[start..t].fill(1);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    out
}

/// Fixed-width feature rows stored contiguously, one binary label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMatrix {
    width: usize,
    data: Vec<f64>,
    labels: Vec<u8>,
}

impl WindowMatrix {
    pub fn new(width: usize, data: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if width == 0 {
            return Err(NilmError::InvalidParameter("window width must be positive".into()));
        }
        if data.len() % width != 0 {
            return Err(NilmError::InvalidParameter(format!(
                "{} values do not form rows of width {width}",
                data.len()
            )));
        }
        if data.len() / width != labels.len() {
            return Err(NilmError::LengthMismatch {
                left: data.len() / width,
                right: labels.len(),
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(NilmError::InvalidParameter("labels must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            data,
            labels,
        })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            width,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Builds a matrix from row slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], labels: Vec<u8>) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(width * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(NilmError::DimensionMismatch {
                    expected: width,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(width.max(1), data, labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn append(&mut self, other: &WindowMatrix) -> Result<()> {
        if other.width != self.width {
            return Err(NilmError::DimensionMismatch {
                expected: self.width,
                actual: other.width,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Every `stride`-th row, starting from the first.
    pub fn strided(&self, stride: usize) -> WindowMatrix {
        let stride = stride.max(1);
        let mut data = Vec::with_capacity(self.data.len() / stride + self.width);
        let mut labels = Vec::with_capacity(self.len() / stride + 1);
        for i in (0..self.len()).step_by(stride) {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        WindowMatrix {
            width: self.width,
            data,
            labels,
        }
    }

    /// Keeps at most `max_rows` rows by even striding.
    pub fn thinned(&self, max_rows: usize) -> WindowMatrix {
        if max_rows == 0 || self.len() <= max_rows {
            return self.clone();
        }
        self.strided(self.len().div_ceil(max_rows))
    }

    pub fn subset(&self, indices: &[usize]) -> WindowMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        WindowMatrix {
            width: self.width,
            data,
            labels,
        }
    }
}

/// Class-indexed count matrix: `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if let Some(row) = counts.iter().find(|r| r.len() != n) {
            return Err(NilmError::DimensionMismatch {
                expected: n,
                actual: row.len(),
            });
        }
        Ok(Self { counts })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn increment(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Correctly classified fraction: trace over total.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(NilmError::Empty("confusion matrix has no counts"));
        }
        Ok(self.trace() as f64 / total as f64)
    }
}
