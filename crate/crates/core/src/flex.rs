//! Flexible-load accounting: per-appliance energy statistics and the split of
//! aggregate demand into flexible and inflexible parts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ApplianceKind, TimeSeries};
use crate::error::{NilmError, Result};

const SECONDS_PER_DAY: i64 = 86_400;

/// Mean and population standard deviation of a power channel.
pub fn appliance_stats(series: &TimeSeries) -> Result<(f64, f64)> {
    mean_std(series.values())
}

fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(NilmError::Empty("power series"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Share of `total` energy drawn by `appliance`, in percent.
pub fn energy_share(appliance: &TimeSeries, total: &TimeSeries) -> Result<f64> {
    if !appliance.is_aligned_with(total) {
        return Err(NilmError::LengthMismatch {
            left: appliance.len(),
            right: total.len(),
        });
    }
    let denom = total.sum();
    if denom <= 0.0 {
        return Err(NilmError::InvalidParameter(
            "total energy must be positive".into(),
        ));
    }
    Ok(100.0 * appliance.sum() / denom)
}

/// Mean draw of `channel` over the samples labelled on.
pub fn mean_on_power(channel: &[f64], labels: &[u8]) -> Result<f64> {
    if channel.len() != labels.len() {
        return Err(NilmError::LengthMismatch {
            left: channel.len(),
            right: labels.len(),
        });
    }
    let (sum, n) = channel
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .fold((0.0, 0usize), |(s, n), (&x, _)| (s + x, n + 1));
    if n == 0 {
        return Err(NilmError::Empty("on samples"));
    }
    Ok(sum / n as f64)
}

/// How much power to attribute to an appliance while it is detected on.
#[derive(Debug, Clone, PartialEq)]
pub enum PowerProfile {
    /// Metered sub-channel, aligned with the aggregate.
    Channel(TimeSeries),
    /// Constant draw, typically [`mean_on_power`] from training data.
    MeanOnPower(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceFlex {
    pub appliance: ApplianceKind,
    pub attributed_wh: f64,
    pub channel_wh: Option<f64>,
    /// Energy attributed through detections, as a percentage of the total.
    pub attributed_share_pct: f64,
    pub attributed_mean_w: f64,
    pub attributed_std_w: f64,
    pub on_fraction: f64,
    /// Statistics of the metered channel, when one was supplied.
    pub channel_share_pct: Option<f64>,
    pub channel_mean_w: Option<f64>,
    pub channel_std_w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyFlex {
    /// Epoch of local midnight opening the day.
    pub day_start: i64,
    pub samples: usize,
    pub total_wh: f64,
    pub flexible_wh: f64,
    pub flexibility_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexReport {
    pub start_epoch: i64,
    pub step: u32,
    pub total_wh: f64,
    pub flexible_wh: f64,
    pub appliances: Vec<ApplianceFlex>,
    pub flexible_w: Vec<f64>,
    pub inflexible_w: Vec<f64>,
    /// Flexible energy over total energy across the whole period.
    pub flexibility_pct: f64,
    /// Sum of per-appliance shares, metered channels where available.
    pub share_sum_pct: f64,
    pub daily: Vec<DailyFlex>,
    /// Mean of the per-day flexibility percentages.
    pub mean_daily_flexibility_pct: f64,
    /// Steps where attributed flexible power exceeded the aggregate and was
    /// capped to it.
    pub clamped_steps: usize,
}

impl FlexReport {
    /// Per-step `epoch,total,flexible,inflexible` rows.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("epoch,total_w,flexible_w,inflexible_w\n");
        for (i, (f, n)) in self.flexible_w.iter().zip(&self.inflexible_w).enumerate() {
            let epoch = self.start_epoch + i as i64 * i64::from(self.step);
            let _ = writeln!(out, "{epoch},{:.3},{:.3},{:.3}", f + n, f, n);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecomposeOptions {
    /// Offset from UTC (seconds) that defines local day boundaries.
    pub utc_offset_s: i64,
}

/// Splits `total` into flexible and inflexible load.
///
/// Flexible load at each step is the summed power of the appliances detected
/// on, capped at the non-negative aggregate so that the two parts always add
/// back up to it.
pub fn decompose(
    total: &TimeSeries,
    detections: &BTreeMap<ApplianceKind, Vec<u8>>,
    profiles: &BTreeMap<ApplianceKind, PowerProfile>,
    opts: DecomposeOptions,
) -> Result<FlexReport> {
    let n = total.len();
    if n == 0 {
        return Err(NilmError::Empty("aggregate series"));
    }
    let total_energy = total.sum();
    if total_energy <= 0.0 {
        return Err(NilmError::InvalidParameter(
            "total energy must be positive".into(),
        ));
    }

    let mut flexible = vec![0.0; n];
    let mut appliances = Vec::new();
    for (kind, det) in detections {
        if det.len() != n {
            return Err(NilmError::LengthMismatch {
                left: det.len(),
                right: n,
            });
        }
        let profile = profiles.get(kind).ok_or_else(|| {
            NilmError::InvalidParameter(format!("no power profile for {kind}"))
        })?;
        let attributed: Vec<f64> = match profile {
            PowerProfile::Channel(ch) => {
                if !ch.is_aligned_with(total) {
                    return Err(NilmError::LengthMismatch {
                        left: ch.len(),
                        right: n,
                    });
                }
                ch.values()
                    .iter()
                    .zip(det)
                    .map(|(&p, &d)| if d == 1 { p.max(0.0) } else { 0.0 })
                    .collect()
            }
            PowerProfile::MeanOnPower(p) => {
                det.iter().map(|&d| if d == 1 { p.max(0.0) } else { 0.0 }).collect()
            }
        };
        for (f, a) in flexible.iter_mut().zip(&attributed) {
            *f += a;
        }
        let (mean, std) = mean_std(&attributed)?;
        let (channel_share_pct, channel_mean_w, channel_std_w) = match profile {
            PowerProfile::Channel(ch) => {
                let (m, s) = appliance_stats(ch)?;
                (Some(energy_share(ch, total)?), Some(m), Some(s))
            }
            PowerProfile::MeanOnPower(_) => (None, None, None),
        };
        let wh = |sum: f64| sum * f64::from(total.step()) / 3600.0;
        appliances.push(ApplianceFlex {
            appliance: kind.clone(),
            attributed_wh: wh(attributed.iter().sum()),
            channel_wh: match profile {
                PowerProfile::Channel(ch) => Some(wh(ch.sum())),
                PowerProfile::MeanOnPower(_) => None,
            },
            attributed_share_pct: 100.0 * attributed.iter().sum::<f64>() / total_energy,
            attributed_mean_w: mean,
            attributed_std_w: std,
            on_fraction: det.iter().filter(|&&d| d == 1).count() as f64 / n as f64,
            channel_share_pct,
            channel_mean_w,
            channel_std_w,
        });
    }

    let mut clamped_steps = 0;
    let mut inflexible = vec![0.0; n];
    for ((f, i), &t) in flexible.iter_mut().zip(inflexible.iter_mut()).zip(total.values()) {
        let cap = t.max(0.0);
        if *f > cap {
            *f = cap;
            clamped_steps += 1;
        }
        *i = t - *f;
    }
    if clamped_steps > 0 {
        log::warn!("flexible load capped at the aggregate on {clamped_steps} steps");
    }

    let flexible_energy: f64 = flexible.iter().sum();
    let flexibility_pct = (100.0 * flexible_energy / total_energy).clamp(0.0, 100.0);
    let share_sum_pct = appliances
        .iter()
        .map(|a| a.channel_share_pct.unwrap_or(a.attributed_share_pct))
        .sum();

    let daily = daily_flexibility(total, &flexible, opts.utc_offset_s);
    let to_wh = f64::from(total.step()) / 3600.0;
    let mean_daily_flexibility_pct = if daily.is_empty() {
        0.0
    } else {
        daily.iter().map(|d| d.flexibility_pct).sum::<f64>() / daily.len() as f64
    };

    Ok(FlexReport {
        start_epoch: total.start_epoch(),
        step: total.step(),
        total_wh: total_energy * to_wh,
        flexible_wh: flexible_energy * to_wh,
        appliances,
        flexible_w: flexible,
        inflexible_w: inflexible,
        flexibility_pct,
        share_sum_pct,
        daily,
        mean_daily_flexibility_pct,
        clamped_steps,
    })
}

/// Totals across several reports, e.g. the contiguous segments of one
/// building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexSummary {
    pub total_wh: f64,
    pub flexible_wh: f64,
    pub flexibility_pct: f64,
    pub share_sum_pct: f64,
    pub shares_pct: BTreeMap<ApplianceKind, f64>,
    pub daily: Vec<DailyFlex>,
    pub mean_daily_flexibility_pct: f64,
    pub clamped_steps: usize,
}

pub fn summarize(reports: &[FlexReport]) -> Result<FlexSummary> {
    let total_wh: f64 = reports.iter().map(|r| r.total_wh).sum();
    if total_wh <= 0.0 {
        return Err(NilmError::InvalidParameter("total energy must be positive".into()));
    }
    let flexible_wh: f64 = reports.iter().map(|r| r.flexible_wh).sum();
    let mut energy: BTreeMap<ApplianceKind, f64> = BTreeMap::new();
    for a in reports.iter().flat_map(|r| &r.appliances) {
        *energy.entry(a.appliance.clone()).or_default() += a.channel_wh.unwrap_or(a.attributed_wh);
    }
    let shares_pct: BTreeMap<ApplianceKind, f64> =
        energy.into_iter().map(|(k, e)| (k, 100.0 * e / total_wh)).collect();
    let mut days: BTreeMap<i64, DailyFlex> = BTreeMap::new();
    for d in reports.iter().flat_map(|r| &r.daily) {
        let e = days.entry(d.day_start).or_insert(DailyFlex {
            day_start: d.day_start,
            samples: 0,
            total_wh: 0.0,
            flexible_wh: 0.0,
            flexibility_pct: 0.0,
        });
        e.samples += d.samples;
        e.total_wh += d.total_wh;
        e.flexible_wh += d.flexible_wh;
    }
    let daily: Vec<DailyFlex> = days
        .into_values()
        .map(|mut d| {
            d.flexibility_pct = (100.0 * d.flexible_wh / d.total_wh).clamp(0.0, 100.0);
            d
        })
        .collect();
    let mean_daily_flexibility_pct = if daily.is_empty() {
        0.0
    } else {
        daily.iter().map(|d| d.flexibility_pct).sum::<f64>() / daily.len() as f64
    };
    Ok(FlexSummary {
        total_wh,
        flexible_wh,
        flexibility_pct: (100.0 * flexible_wh / total_wh).clamp(0.0, 100.0),
        share_sum_pct: shares_pct.values().sum(),
        shares_pct,
        daily,
        mean_daily_flexibility_pct,
        clamped_steps: reports.iter().map(|r| r.clamped_steps).sum(),
    })
}

/// Flexibility percentage per local calendar day. Days with no positive
/// energy are skipped.
pub fn daily_flexibility(total: &TimeSeries, flexible: &[f64], utc_offset_s: i64) -> Vec<DailyFlex> {
    let to_wh = f64::from(total.step()) / 3600.0;
    let mut out: Vec<DailyFlex> = Vec::new();
    let mut acc: Option<(i64, usize, f64, f64)> = None;
    let flush = |acc: Option<(i64, usize, f64, f64)>, out: &mut Vec<DailyFlex>| {
        if let Some((day, samples, t, f)) = acc {
            if t > 0.0 {
                out.push(DailyFlex {
                    day_start: day,
                    samples,
                    total_wh: t * to_wh,
                    flexible_wh: f * to_wh,
                    flexibility_pct: (100.0 * f / t).clamp(0.0, 100.0),
                });
            }
        }
    };
    for (i, (&t, &f)) in total.values().iter().zip(flexible).enumerate() {
        let local = total.epoch_at(i) + utc_offset_s;
        let day = local.div_euclid(SECONDS_PER_DAY) * SECONDS_PER_DAY - utc_offset_s;
        match &mut acc {
            Some((d, samples, tt, ff)) if *d == day => {
                *samples += 1;
                *tt += t;
                *ff += f;
            }
            _ => {
                flush(acc.take(), &mut out);
                acc = Some((day, 1, t, f));
            }
        }
    }
    flush(acc, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(values: &[f64]) -> TimeSeries {
        TimeSeries::new(0, 3, values.to_vec()).unwrap()
    }

    #[test]
    fn stats_use_population_std() {
        let (m, s) = appliance_stats(&ts(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0])).unwrap();
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
        assert!(appliance_stats(&ts(&[])).is_err());
    }

    #[test]
    fn shares() {
        let total = ts(&[100.0, 100.0, 100.0, 100.0]);
        assert_eq!(energy_share(&ts(&[50.0, 0.0, 50.0, 0.0]), &total).unwrap(), 25.0);
        assert!(energy_share(&ts(&[1.0]), &total).is_err());
        assert!(energy_share(&ts(&[0.0; 4]), &ts(&[0.0; 4])).is_err());
    }

    #[test]
    fn decompose_caps_and_conserves() {
        let total = ts(&[100.0, 50.0, 10.0, 0.0]);
        let mut det = BTreeMap::new();
        det.insert(ApplianceKind::Dishwasher, vec![1, 1, 1, 0]);
        let mut prof = BTreeMap::new();
        prof.insert(ApplianceKind::Dishwasher, PowerProfile::MeanOnPower(40.0));
        let r = decompose(&total, &det, &prof, DecomposeOptions::default()).unwrap();
        assert_eq!(r.flexible_w, vec![40.0, 40.0, 10.0, 0.0]);
        assert_eq!(r.inflexible_w, vec![60.0, 10.0, 0.0, 0.0]);
        assert_eq!(r.clamped_steps, 1);
        assert!((r.flexibility_pct - 90.0 / 160.0 * 100.0).abs() < 1e-12);
        assert_eq!(r.appliances[0].attributed_share_pct, 75.0);
        assert_eq!(r.appliances[0].on_fraction, 0.75);
    }

    #[test]
    fn decompose_rejects_bad_inputs() {
        let total = ts(&[1.0, 2.0]);
        let mut det = BTreeMap::new();
        det.insert(ApplianceKind::Refrigerator, vec![1]);
        let mut prof = BTreeMap::new();
        prof.insert(ApplianceKind::Refrigerator, PowerProfile::MeanOnPower(1.0));
        assert!(decompose(&total, &det, &prof, DecomposeOptions::default()).is_err());
        det.insert(ApplianceKind::Refrigerator, vec![1, 0]);
        assert!(decompose(&total, &det, &BTreeMap::new(), DecomposeOptions::default()).is_err());
        assert!(decompose(&ts(&[0.0, 0.0]), &det, &prof, DecomposeOptions::default()).is_err());
    }

    #[test]
    fn day_windows_respect_offset() {
        // Two samples either side of UTC midnight.
        let total = TimeSeries::new(SECONDS_PER_DAY - 3, 3, vec![10.0, 10.0]).unwrap();
        let flex = [10.0, 0.0];
        let utc = daily_flexibility(&total, &flex, 0);
        assert_eq!(utc.len(), 2);
        assert_eq!(utc[0].flexibility_pct, 100.0);
        assert_eq!(utc[1].flexibility_pct, 0.0);
        let shifted = daily_flexibility(&total, &flex, -4 * 3600);
        assert_eq!(shifted.len(), 1);
        assert_eq!(shifted[0].flexibility_pct, 50.0);
        assert_eq!(shifted[0].day_start, 4 * 3600);
    }

    #[test]
    fn summary_pools_segments() {
        let mut det = BTreeMap::new();
        det.insert(ApplianceKind::Refrigerator, vec![1, 0]);
        let mut prof = BTreeMap::new();
        prof.insert(ApplianceKind::Refrigerator, PowerProfile::MeanOnPower(50.0));
        let a = decompose(&ts(&[100.0, 100.0]), &det, &prof, DecomposeOptions::default()).unwrap();
        let later = TimeSeries::new(600, 3, vec![300.0, 100.0]).unwrap();
        let b = decompose(&later, &det, &prof, DecomposeOptions::default()).unwrap();
        let s = summarize(&[a, b]).unwrap();
        assert!((s.flexibility_pct - 100.0 * 100.0 / 600.0).abs() < 1e-12);
        assert_eq!(s.daily.len(), 1);
        assert!((s.daily[0].flexibility_pct - s.flexibility_pct).abs() < 1e-12);
        assert!((s.share_sum_pct - s.flexibility_pct).abs() < 1e-12);
        assert!(summarize(&[]).is_err());
    }

    proptest! {
        #[test]
        fn conservation_and_bounds(
            rows in proptest::collection::vec((0.0f64..5000.0, 0u8..2, 0.0f64..3000.0, 0u8..2), 1..200),
            fridge_w in 0.0f64..400.0,
        ) {
            let total = ts(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
            prop_assume!(total.sum() > 0.0);
            let heater = ts(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
            let mut det = BTreeMap::new();
            det.insert(ApplianceKind::Refrigerator, rows.iter().map(|r| r.1).collect());
            det.insert(ApplianceKind::ElectricHeater, rows.iter().map(|r| r.3).collect());
            let mut prof = BTreeMap::new();
            prof.insert(ApplianceKind::Refrigerator, PowerProfile::MeanOnPower(fridge_w));
            prof.insert(ApplianceKind::ElectricHeater, PowerProfile::Channel(heater));
            let r = decompose(&total, &det, &prof, DecomposeOptions::default()).unwrap();
            for ((f, i), t) in r.flexible_w.iter().zip(&r.inflexible_w).zip(total.values()) {
                prop_assert!(*f >= 0.0 && *f <= t.max(0.0));
                prop_assert!((f + i - t).abs() <= 1e-9 * t.abs().max(1.0));
            }
            prop_assert!((0.0..=100.0).contains(&r.flexibility_pct));
            for d in &r.daily {
                prop_assert!((0.0..=100.0).contains(&d.flexibility_pct));
            }
        }
    }
}
