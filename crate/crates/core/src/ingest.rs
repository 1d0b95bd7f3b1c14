//! REDD low-frequency directory parsing and channel alignment.
//!
//! A house directory holds `labels.dat` (`<channel> <label>` per line) and one
//! `channel_<n>.dat` per channel with `<epoch> <watts>` lines. Mains channels
//! are summed into the building total; every channel is brought onto a common
//! grid by mean-aggregating the samples that fall into each target step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ApplianceKind, TimeSeries};
use crate::error::{NilmError, Result};

/// One channel as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChannel {
    pub channel: u32,
    pub label: String,
    pub samples: Vec<(i64, f64)>,
}

impl RawChannel {
    pub fn is_mains(&self) -> bool {
        self.label.trim().eq_ignore_ascii_case("mains")
    }
}

/// A building (or one contiguous segment of it) on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingData {
    pub building_id: u32,
    pub mains: TimeSeries,
    pub appliances: BTreeMap<ApplianceKind, TimeSeries>,
    pub label_map: BTreeMap<u32, String>,
}

impl BuildingData {
    pub fn appliance(&self, kind: &ApplianceKind) -> Result<&TimeSeries> {
        self.appliances
            .get(kind)
            .ok_or_else(|| NilmError::MissingAppliance {
                building: self.building_id,
                appliance: kind.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleOptions {
    pub target_step: u32,
    /// Longest run of empty target steps bridged by forward fill.
    pub gap_limit: usize,
    /// Reject longer gaps instead of splitting the building into segments.
    pub strict_gaps: bool,
}

impl Default for ResampleOptions {
    fn default() -> Self {
        Self {
            target_step: 3,
            gap_limit: 20,
            strict_gaps: false,
        }
    }
}

pub fn parse_channel_file(bytes: &[u8]) -> Result<Vec<(i64, f64)>> {
    let text = std::str::from_utf8(bytes).map_err(|e| NilmError::Parse {
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut out = Vec::new();
    let mut last_epoch = i64::MIN;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let malformed = |message: String| NilmError::Parse {
            line: line_no,
            message,
        };
        let (epoch, watts) = line
            .split_once(' ')
            .ok_or_else(|| malformed(format!("expected `<epoch> <watts>`, got {line:?}")))?;
        let epoch: i64 = epoch
            .parse()
            .map_err(|_| malformed(format!("bad epoch {epoch:?}")))?;
        let watts: f64 = watts
            .parse()
            .map_err(|_| malformed(format!("bad reading {watts:?}")))?;
        if !watts.is_finite() {
            return Err(malformed(format!("non-finite reading {watts}")));
        }
        if epoch < last_epoch {
            return Err(malformed(format!(
                "timestamp {epoch} goes backwards (previous {last_epoch})"
            )));
        }
        last_epoch = epoch;
        out.push((epoch, watts));
    }
    Ok(out)
}

/// Inverse of [`parse_channel_file`], `%d %f` per line.
pub fn serialize_channel(samples: &[(i64, f64)]) -> String {
    let mut out = String::with_capacity(samples.len() * 20);
    for (epoch, watts) in samples {
        let _ = writeln!(out, "{epoch} {watts:.6}");
    }
    out
}

pub fn parse_labels_file(bytes: &[u8]) -> Result<BTreeMap<u32, String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| NilmError::Parse {
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (channel, label) = line.split_once(' ').ok_or_else(|| NilmError::Parse {
            line: i + 1,
            message: format!("expected `<channel> <label>`, got {line:?}"),
        })?;
        let channel: u32 = channel.parse().map_err(|_| NilmError::Parse {
            line: i + 1,
            message: format!("bad channel number {channel:?}"),
        })?;
        if map.insert(channel, label.trim().to_string()).is_some() {
            return Err(NilmError::DuplicateChannel(channel));
        }
    }
    Ok(map)
}

fn source_step(samples: &[(i64, f64)]) -> i64 {
    let mut diffs: Vec<i64> = samples
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .filter(|&d| d > 0)
        .collect();
    if diffs.is_empty() {
        return 1;
    }
    let mid = (diffs.len() - 1) / 2;
    *diffs.select_nth_unstable(mid).1
}

/// Mean-aggregates one channel onto `n` target steps starting at `origin`,
/// forward-filling runs of at most `gap_limit` empty steps. Unfilled steps are `None`.
fn bucket_channel(
    samples: &[(i64, f64)],
    origin: i64,
    step: i64,
    n: usize,
    gap_limit: usize,
) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; n];
    let mut counts = vec![0u32; n];
    let mut carry: Option<(i64, f64)> = None;
    for &(epoch, watts) in samples {
        if epoch < origin {
            carry = Some((epoch, watts));
            continue;
        }
        let idx = ((epoch - origin) / step) as usize;
        if idx >= n {
            break;
        }
        sums[idx] += watts;
        counts[idx] += 1;
    }

    let mut out: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();

    // A sample just before the grid can seed a leading gap.
    let mut last: Option<f64> = carry.and_then(|(epoch, watts)| {
        let steps_before = ((origin - epoch) / step) as usize;
        (steps_before <= gap_limit).then_some(watts)
    });
    let mut i = 0;
    while i < n {
        if let Some(v) = out[i] {
            last = Some(v);
            i += 1;
            continue;
        }
        let gap_start = i;
        while i < n && out[i].is_none() {
            i += 1;
        }
        if i - gap_start <= gap_limit {
            if let Some(v) = last {
                out[gap_start..i].fill(Some(v));
            }
        }
    }
    out
}

/// Puts every channel on a common `target_step` grid over the time range shared
/// by all channels. Mains channels are summed; appliance channels of the same
/// kind are summed. Gaps longer than the limit split the result into segments,
/// or fail when `strict_gaps` is set.
pub fn align_and_resample(
    building_id: u32,
    channels: &[RawChannel],
    opts: &ResampleOptions,
) -> Result<Vec<BuildingData>> {
    if opts.target_step == 0 {
        return Err(NilmError::InvalidParameter("target step must be positive".into()));
    }
    let step = opts.target_step as i64;
    let (mains, others): (Vec<&RawChannel>, Vec<&RawChannel>) =
        channels.iter().partition(|c| c.is_mains());
    if mains.is_empty() {
        return Err(NilmError::InvalidParameter(format!(
            "building {building_id} has no mains channel"
        )));
    }
    for c in channels {
        let src = source_step(&c.samples);
        if src > step || step % src != 0 {
            return Err(NilmError::InvalidParameter(format!(
                "channel {} samples every {src} s, not a divisor of the {step} s target",
                c.channel
            )));
        }
    }
    let range = |c: &RawChannel| -> Option<(i64, i64)> {
        Some((c.samples.first()?.0, c.samples.last()?.0))
    };
    let no_overlap = |c: &RawChannel| NilmError::NoOverlap {
        channel: c.channel,
        label: c.label.clone(),
    };

    let mut origin = i64::MIN;
    let mut end = i64::MAX;
    for c in &mains {
        let (first, last) = range(c).ok_or_else(|| no_overlap(c))?;
        origin = origin.max(first);
        end = end.min(last);
    }
    if end < origin {
        return Err(no_overlap(mains[mains.len() - 1]));
    }
    for c in &others {
        let (first, last) = range(c).ok_or_else(|| no_overlap(c))?;
        if first > end || last < origin {
            return Err(no_overlap(c));
        }
        origin = origin.max(first);
        end = end.min(last);
    }
    let n = ((end - origin) / step + 1) as usize;

    let bucketed: Vec<Vec<Option<f64>>> = channels
        .par_iter()
        .map(|c| bucket_channel(&c.samples, origin, step, n, opts.gap_limit))
        .collect();

    let mut mains_sum: Vec<Option<f64>> = vec![Some(0.0); n];
    let mut appliance_sums: BTreeMap<ApplianceKind, Vec<Option<f64>>> = BTreeMap::new();
    for (c, values) in channels.iter().zip(&bucketed) {
        let target = if c.is_mains() {
            &mut mains_sum
        } else {
            appliance_sums
                .entry(ApplianceKind::from_label(&c.label))
                .or_insert_with(|| vec![Some(0.0); n])
        };
        for (acc, v) in target.iter_mut().zip(values) {
            *acc = match (*acc, *v) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            };
        }
    }

    let valid: Vec<bool> = (0..n)
        .map(|i| mains_sum[i].is_some() && appliance_sums.values().all(|s| s[i].is_some()))
        .collect();

    let mut runs = Vec::new();
    let mut i = 0;
    while i < n {
        if !valid[i] {
            let gap_start = i;
            while i < n && !valid[i] {
                i += 1;
            }
            if opts.strict_gaps {
                return Err(NilmError::GapTooLong {
                    gap_steps: i - gap_start,
                    limit: opts.gap_limit,
                    epoch: origin + gap_start as i64 * step,
                });
            }
            continue;
        }
        let run_start = i;
        while i < n && valid[i] {
            i += 1;
        }
        runs.push(run_start..i);
    }

    let label_map: BTreeMap<u32, String> =
        channels.iter().map(|c| (c.channel, c.label.clone())).collect();
    let unwrap_run = |v: &[Option<f64>], r: &std::ops::Range<usize>| -> Vec<f64> {
        v[r.clone()].iter().map(|x| x.unwrap_or(0.0)).collect()
    };
    runs.iter()
        .map(|r| {
            let start = origin + r.start as i64 * step;
            let mains = TimeSeries::new(start, opts.target_step, unwrap_run(&mains_sum, r))?;
            let appliances = appliance_sums
                .iter()
                .map(|(kind, v)| {
                    Ok((
                        kind.clone(),
                        TimeSeries::new(start, opts.target_step, unwrap_run(v, r))?,
                    ))
                })
                .collect::<Result<_>>()?;
            Ok(BuildingData {
                building_id,
                mains,
                appliances,
                label_map: label_map.clone(),
            })
        })
        .collect()
}

pub fn house_dir(root: &Path, house: u32) -> PathBuf {
    root.join(format!("house_{house}"))
}

/// Reads every labelled channel of one house. Channel files are parsed in parallel.
pub fn read_house(root: &Path, house: u32) -> Result<Vec<RawChannel>> {
    let dir = house_dir(root, house);
    let labels_path = dir.join("labels.dat");
    let labels = parse_labels_file(
        &fs::read(&labels_path).map_err(|e| NilmError::io(&labels_path, e))?,
    )?;
    labels
        .into_par_iter()
        .map(|(channel, label)| {
            let path = dir.join(format!("channel_{channel}.dat"));
            let bytes = fs::read(&path).map_err(|e| NilmError::io(&path, e))?;
            let samples = parse_channel_file(&bytes).map_err(|e| match e {
                NilmError::Parse { line, message } => NilmError::Parse {
                    line,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?;
            Ok(RawChannel {
                channel,
                label,
                samples,
            })
        })
        .collect()
}

pub fn load_house(root: &Path, house: u32, opts: &ResampleOptions) -> Result<Vec<BuildingData>> {
    align_and_resample(house, &read_house(root, house)?, opts)
}

pub fn load_houses(
    root: &Path,
    houses: &[u32],
    opts: &ResampleOptions,
) -> Result<Vec<BuildingData>> {
    let mut out = Vec::new();
    for &house in houses {
        out.extend(load_house(root, house, opts)?);
    }
    Ok(out)
}

/// Writes channels in REDD layout under `<root>/house_<k>/`.
pub fn write_house(root: &Path, house: u32, channels: &[RawChannel]) -> Result<()> {
    let dir = house_dir(root, house);
    fs::create_dir_all(&dir).map_err(|e| NilmError::io(&dir, e))?;
    let mut labels = String::new();
    for c in channels {
        let _ = writeln!(labels, "{} {}", c.channel, c.label);
        let path = dir.join(format!("channel_{}.dat", c.channel));
        fs::write(&path, serialize_channel(&c.samples)).map_err(|e| NilmError::io(&path, e))?;
    }
    let path = dir.join("labels.dat");
    fs::write(&path, labels).map_err(|e| NilmError::io(&path, e))
}

/// REDD's on-disk label for an appliance kind.
pub fn redd_label(kind: &ApplianceKind) -> &str {
    match kind {
        ApplianceKind::ElectricHeater => "electric_heat",
        ApplianceKind::Dishwasher => "dishwaser",
        other => other.name(),
    }
}
