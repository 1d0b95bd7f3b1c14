//! Median filtering, causal windowing, min-max scaling and leave-one-building-out
//! experiment assembly.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data::{label_activation, ApplianceKind, LabelPolicy, TimeSeries, WindowMatrix};
use crate::error::{NilmError, Result};
use crate::ingest::BuildingData;

/// Trailing median over the last `k` samples. Until `k` samples have been seen
/// the median is taken over what is available; even counts use the lower median.
#[derive(Debug, Clone)]
pub struct CausalMedian {
    k: usize,
    window: VecDeque<f64>,
    scratch: Vec<f64>,
}

impl CausalMedian {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(NilmError::InvalidParameter("median window must be at least 1".into()));
        }
        Ok(Self {
            k,
            window: VecDeque::with_capacity(k),
            scratch: Vec::with_capacity(k),
        })
    }

    pub fn push(&mut self, x: f64) -> f64 {
        if self.window.len() == self.k {
            self.window.pop_front();
        }
        self.window.push_back(x);
        self.scratch.clear();
        self.scratch.extend(self.window.iter().copied());
        let mid = (self.scratch.len() - 1) / 2;
        *self
            .scratch
            .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
            .1
    }
}

pub fn median_filter_values(values: &[f64], k: usize) -> Result<Vec<f64>> {
    if k > values.len() {
        return Err(NilmError::InvalidParameter(format!(
            "median window {k} longer than series of {} samples",
            values.len()
        )));
    }
    let mut filter = CausalMedian::new(k)?;
    Ok(values.iter().map(|&v| filter.push(v)).collect())
}

pub fn median_filter(ts: &TimeSeries, k: usize) -> Result<TimeSeries> {
    ts.with_values(median_filter_values(ts.values(), k)?)
}

/// Causal windows: row `i` holds `aggregate[i..i + w]` and carries the label of
/// its last sample, `labels[i + w - 1]`.
pub fn make_windows(aggregate: &[f64], labels: &[u8], w: usize) -> Result<WindowMatrix> {
    if aggregate.len() != labels.len() {
        return Err(NilmError::LengthMismatch {
            left: aggregate.len(),
            right: labels.len(),
        });
    }
    if w == 0 || aggregate.len() < w {
        return Err(NilmError::InvalidParameter(format!(
            "cannot cut windows of {w} from {} samples",
            aggregate.len()
        )));
    }
    let rows = aggregate.len() - w + 1;
    let mut data = Vec::with_capacity(rows * w);
    for window in aggregate.windows(w) {
        data.extend_from_slice(window);
    }
    WindowMatrix::new(w, data, labels[w - 1..].to_vec())
}

/// Min-max scaling to `[0, 1]`, fitted on training data only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min_w: f64,
    pub max_w: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(NilmError::Empty("scaler training data"));
        }
        let (min_w, max_w) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if max_w <= min_w {
            return Err(NilmError::InvalidParameter(format!(
                "constant training data ({min_w} W) cannot be scaled"
            )));
        }
        Ok(Self { min_w, max_w })
    }

    pub fn fit_rows(rows: &WindowMatrix) -> Result<Self> {
        Self::fit(rows.data())
    }

    #[inline]
    pub fn scale(&self, x: f64) -> f64 {
        ((x - self.min_w) / (self.max_w - self.min_w)).clamp(0.0, 1.0)
    }

    pub fn apply(&self, rows: &mut WindowMatrix) {
        for x in rows.data_mut() {
            *x = self.scale(*x);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub window: usize,
    pub median_k: usize,
    pub filter_aggregate: bool,
    pub filter_appliances: bool,
    /// Per-appliance overrides of [`LabelPolicy::default_for`].
    pub label_policies: BTreeMap<ApplianceKind, LabelPolicy>,
    /// Drop training buildings that lack the appliance instead of failing.
    pub allow_missing_appliance: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: 10,
            median_k: 6,
            filter_aggregate: true,
            filter_appliances: true,
            label_policies: BTreeMap::new(),
            allow_missing_appliance: false,
        }
    }
}

impl PreprocessConfig {
    pub fn policy(&self, kind: &ApplianceKind) -> LabelPolicy {
        self.label_policies
            .get(kind)
            .copied()
            .unwrap_or_else(|| LabelPolicy::default_for(kind))
    }

    /// Shortest segment that yields at least one window.
    pub fn min_segment_len(&self) -> usize {
        self.window.max(self.median_k)
    }

    /// Filtered aggregate signal for one segment.
    pub fn aggregate_signal(&self, segment: &BuildingData) -> Result<Vec<f64>> {
        if self.filter_aggregate {
            median_filter_values(segment.mains.values(), self.median_k)
        } else {
            Ok(segment.mains.values().to_vec())
        }
    }

    /// Ground-truth on/off labels for one segment.
    pub fn labels(&self, segment: &BuildingData, kind: &ApplianceKind) -> Result<Vec<u8>> {
        let channel = segment.appliance(kind)?;
        let filtered;
        let channel = if self.filter_appliances {
            filtered = median_filter(channel, self.median_k)?;
            &filtered
        } else {
            channel
        };
        Ok(label_activation(channel, &self.policy(kind)))
    }

    /// Unscaled labelled windows for one segment.
    pub fn segment_windows(
        &self,
        segment: &BuildingData,
        kind: &ApplianceKind,
    ) -> Result<WindowMatrix> {
        let aggregate = self.aggregate_signal(segment)?;
        let labels = self.labels(segment, kind)?;
        make_windows(&aggregate, &labels, self.window)
    }
}

/// Unscaled windows from every segment of one building. `None` when the
/// appliance is absent and `skip_missing` is set.
pub fn building_windows(
    buildings: &[BuildingData],
    id: u32,
    appliance: &ApplianceKind,
    cfg: &PreprocessConfig,
    skip_missing: bool,
) -> Result<Option<WindowMatrix>> {
    let segments: Vec<&BuildingData> = buildings.iter().filter(|b| b.building_id == id).collect();
    if segments.is_empty() {
        return Err(NilmError::InvalidParameter(format!("building {id} is not loaded")));
    }
    if !segments[0].appliances.contains_key(appliance) {
        if skip_missing {
            return Ok(None);
        }
        return Err(NilmError::MissingAppliance {
            building: id,
            appliance: appliance.to_string(),
        });
    }
    let mut rows = WindowMatrix::empty(cfg.window);
    for segment in segments {
        if segment.mains.len() < cfg.min_segment_len() {
            continue;
        }
        rows.append(&cfg.segment_windows(segment, appliance)?)?;
    }
    Ok(Some(rows))
}

/// Unscaled training windows pooled over `train_ids`, plus the buildings that
/// actually contributed.
pub fn training_windows(
    buildings: &[BuildingData],
    train_ids: &[u32],
    appliance: &ApplianceKind,
    cfg: &PreprocessConfig,
) -> Result<(WindowMatrix, Vec<u32>)> {
    if train_ids.is_empty() {
        return Err(NilmError::Empty("training building set"));
    }
    let mut train = WindowMatrix::empty(cfg.window);
    let mut used = Vec::new();
    for &id in train_ids {
        if let Some(rows) = building_windows(buildings, id, appliance, cfg, cfg.allow_missing_appliance)? {
            train.append(&rows)?;
            used.push(id);
        }
    }
    if train.is_empty() {
        return Err(NilmError::Empty("training windows"));
    }
    Ok((train, used))
}

/// Scaled train/test windows for one appliance.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub appliance: ApplianceKind,
    pub train: WindowMatrix,
    pub test: WindowMatrix,
    pub scaler: Scaler,
    pub train_buildings: Vec<u32>,
    pub test_building: u32,
}

pub fn build_experiment(
    buildings: &[BuildingData],
    train_ids: &[u32],
    test_id: u32,
    appliance: &ApplianceKind,
    cfg: &PreprocessConfig,
) -> Result<Experiment> {
    if train_ids.contains(&test_id) {
        return Err(NilmError::InvalidParameter(format!(
            "building {test_id} is in both the training and the test set"
        )));
    }
    let (mut train, used) = training_windows(buildings, train_ids, appliance, cfg)?;
    let mut test = building_windows(buildings, test_id, appliance, cfg, false)?
        .expect("missing appliance is an error for the test building");
    if test.is_empty() {
        return Err(NilmError::Empty("test windows"));
    }

    let scaler = Scaler::fit_rows(&train)?;
    scaler.apply(&mut train);
    scaler.apply(&mut test);
    Ok(Experiment {
        appliance: appliance.clone(),
        train,
        test,
        scaler,
        train_buildings: used,
        test_building: test_id,
    })
}
