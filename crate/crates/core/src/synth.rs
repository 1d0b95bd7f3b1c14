//! Seeded synthetic households with known ground truth.
//!
//! Each appliance has a simple generative model: a duty-cycling fridge, a
//! thermostat-driven heater over a first-order thermal model, and washer and
//! dishwasher programs that start at Poisson times. A mean-reverting base
//! load and Gaussian meter noise complete the aggregate.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{label_activation, ApplianceKind, LabelPolicy, TimeSeries};
use crate::error::{NilmError, Result};
use crate::ingest::{redd_label, write_house, BuildingData, RawChannel};

const SECONDS_PER_DAY: f64 = 86_400.0;
/// 2011-04-18 00:00:00 UTC.
pub const DEFAULT_START_EPOCH: i64 = 1_303_084_800;
/// Fraction of the aggregate written to the first mains phase.
const PHASE_A_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FridgeSpec {
    pub on_w: f64,
    pub standby_w: f64,
    pub period_steps: usize,
    pub duty: f64,
    /// Relative jitter of each cycle length.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaterSpec {
    pub power_w: f64,
    pub setpoint_c: f64,
    pub band_c: f64,
    pub outdoor_mean_c: f64,
    pub outdoor_swing_c: f64,
    pub tau_h: f64,
    /// Heating rate at full power, in °C per hour.
    pub gain_c_per_h: f64,
    /// Local hours `[start, end)` during which the thermostat is enabled.
    pub schedule_h: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramSpec {
    /// `(watts, steps)` per stage.
    pub stages: Vec<(f64, usize)>,
    pub starts_per_day: f64,
    pub standby_w: f64,
}

impl ProgramSpec {
    pub fn len(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseLoadSpec {
    pub mean_w: f64,
    pub sigma_w: f64,
    /// Per-step pull towards the mean.
    pub reversion: f64,
    pub max_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub building_id: u32,
    pub start_epoch: i64,
    pub step: u32,
    pub n_steps: usize,
    pub noise_sigma_w: f64,
    pub base: Option<BaseLoadSpec>,
    pub fridge: Option<FridgeSpec>,
    pub heater: Option<HeaterSpec>,
    pub washer: Option<ProgramSpec>,
    pub dishwasher: Option<ProgramSpec>,
}

impl SynthSpec {
    /// A household with all four appliances. Parameters vary a little with
    /// the building id so houses are not copies of each other.
    pub fn household(building_id: u32, days: f64) -> Self {
        let v = f64::from(building_id % 4);
        let w = f64::from(building_id % 3);
        let step = 3;
        let scale = 0.9 + 0.05 * v;
        let program = |stages: &[(f64, usize)], starts_per_day: f64, standby_w: f64| ProgramSpec {
            stages: stages.iter().map(|&(p, n)| (p * scale, n)).collect(),
            starts_per_day,
            standby_w,
        };
        Self {
            building_id,
            start_epoch: DEFAULT_START_EPOCH,
            step,
            n_steps: (days * SECONDS_PER_DAY / f64::from(step)).round() as usize,
            noise_sigma_w: 5.0,
            base: Some(BaseLoadSpec {
                mean_w: 120.0 + 30.0 * v,
                sigma_w: 4.0,
                reversion: 2e-3,
                max_w: 900.0,
            }),
            fridge: Some(FridgeSpec {
                on_w: 110.0 + 10.0 * v,
                standby_w: 3.0,
                period_steps: 1000 + 150 * (building_id % 3) as usize,
                duty: 0.4,
                jitter: 0.15,
            }),
            heater: Some(HeaterSpec {
                power_w: 1200.0 + 150.0 * w,
                setpoint_c: 20.0,
                band_c: 0.5,
                outdoor_mean_c: 13.0 + w,
                outdoor_swing_c: 4.0,
                tau_h: 4.0,
                gain_c_per_h: 12.0,
                schedule_h: vec![(6.0, 8.0), (18.0, 21.0)],
            }),
            washer: Some(program(
                &[(60.0, 100), (1800.0, 300), (250.0, 400), (500.0, 100)],
                0.8,
                2.0,
            )),
            dishwasher: Some(program(
                &[(150.0, 200), (1200.0, 400), (80.0, 600), (1200.0, 300)],
                0.7,
                1.0,
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(NilmError::InvalidParameter(format!("synthetic spec: {what}")));
        if self.step == 0 || self.n_steps == 0 {
            return bad("step and length must be positive");
        }
        if !(self.noise_sigma_w >= 0.0 && self.noise_sigma_w.is_finite()) {
            return bad("noise sigma must be non-negative");
        }
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if let Some(b) = &self.base {
            if !(nonneg(b.mean_w) && nonneg(b.sigma_w) && nonneg(b.max_w))
                || !(0.0..=1.0).contains(&b.reversion)
            {
                return bad("base load parameters");
            }
        }
        if let Some(f) = &self.fridge {
            if !(nonneg(f.on_w) && nonneg(f.standby_w)) || f.period_steps < 2 {
                return bad("fridge powers must be non-negative and the period at least 2 steps");
            }
            if !(f.duty > 0.0 && f.duty < 1.0) || !(0.0..1.0).contains(&f.jitter) {
                return bad("fridge duty must lie in (0, 1) and jitter in [0, 1)");
            }
        }
        if let Some(h) = &self.heater {
            let hours_ok = h.schedule_h.iter().all(|&(a, b)| 0.0 <= a && a < b && b <= 24.0);
            if !(nonneg(h.power_w) && h.band_c > 0.0 && h.tau_h > 0.0 && nonneg(h.gain_c_per_h) && hours_ok) {
                return bad("heater parameters");
            }
        }
        for p in [&self.washer, &self.dishwasher].into_iter().flatten() {
            if p.is_empty() || !nonneg(p.starts_per_day) || !nonneg(p.standby_w) {
                return bad("programs need at least one step and non-negative rates");
            }
            if p.stages.iter().any(|s| !nonneg(s.0)) {
                return bad("program stage powers must be non-negative");
            }
            if p.len() > self.n_steps {
                return bad("program longer than the series");
            }
        }
        Ok(())
    }
}

/// A generated house: resampled data plus exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthHouse {
    pub building: BuildingData,
    /// On/off masks at the policies in `policies`.
    pub masks: BTreeMap<ApplianceKind, Vec<u8>>,
    pub policies: BTreeMap<ApplianceKind, LabelPolicy>,
    /// Percentage of aggregate energy drawn by the four flexible appliances.
    pub true_flexible_share_pct: f64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn fridge_trace<R: Rng>(spec: &FridgeSpec, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    // Random phase so houses do not start in lockstep.
    let mut skip = rng.random_range(0..spec.period_steps);
    while out.len() < n {
        let factor = 1.0 + spec.jitter * rng.random_range(-1.0..=1.0);
        let cycle = ((spec.period_steps as f64 * factor).round() as usize).max(2);
        let on = ((cycle as f64 * spec.duty).round() as usize).clamp(1, cycle - 1);
        for i in 0..cycle {
            if skip > 0 {
                skip -= 1;
                continue;
            }
            let p = if i < on {
                // Short compressor start-up surge.
                if i < 2 { spec.on_w * 1.5 } else { spec.on_w }
            } else {
                spec.standby_w
            };
            out.push(p);
        }
    }
    out.truncate(n);
    out
}

fn heater_trace(spec: &HeaterSpec, start_epoch: i64, step: u32, n: usize) -> Vec<f64> {
    let dt_h = f64::from(step) / 3600.0;
    let mut temp = spec.setpoint_c;
    let mut on = false;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let epoch = start_epoch + t as i64 * i64::from(step);
        let hour = (epoch as f64 / 3600.0).rem_euclid(24.0);
        // Coldest around 03:00, warmest around 15:00.
        let outdoor = spec.outdoor_mean_c - spec.outdoor_swing_c * (2.0 * PI * (hour - 3.0) / 24.0).cos();
        let enabled = spec.schedule_h.iter().any(|&(a, b)| a <= hour && hour < b);
        if !enabled {
            on = false;
        } else if temp < spec.setpoint_c - spec.band_c {
            on = true;
        } else if temp > spec.setpoint_c + spec.band_c {
            on = false;
        }
        let heat = if on { spec.gain_c_per_h } else { 0.0 };
        temp += dt_h * ((outdoor - temp) / spec.tau_h + heat);
        out.push(if on { spec.power_w } else { 0.0 });
    }
    out
}

fn program_trace<R: Rng>(spec: &ProgramSpec, step: u32, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![spec.standby_w; n];
    let len = spec.len();
    let rate = spec.starts_per_day * f64::from(step) / SECONDS_PER_DAY;
    let mut starts = Vec::new();
    if rate > 0.0 {
        let gaps = Exp::new(rate).expect("positive rate");
        let mut t = gaps.sample(rng);
        while (t as usize) + len <= n {
            let s = t as usize;
            starts.push(s);
            t = (s + len) as f64 + gaps.sample(rng);
        }
    }
    if starts.is_empty() {
        starts.push(rng.random_range(0..=n - len));
    }
    for s in starts {
        let mut t = s;
        for &(watts, steps) in &spec.stages {
            for x in &mut out[t..t + steps] {
                *x = watts * (1.0 + rng.random_range(-0.02..=0.02));
            }
            t += steps;
        }
    }
    out
}

fn base_trace<R: Rng>(spec: &BaseLoadSpec, n: usize, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, spec.sigma_w).expect("finite sigma");
    let mut b = spec.mean_w;
    (0..n)
        .map(|_| {
            b += spec.reversion * (spec.mean_w - b) + noise.sample(rng);
            b = b.clamp(0.0, spec.max_w);
            b
        })
        .collect()
}

/// Generates one house. The same spec and seed give bit-identical output.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthHouse> {
    spec.validate()?;
    let n = spec.n_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(spec.building_id));

    let mut channels: BTreeMap<ApplianceKind, Vec<f64>> = BTreeMap::new();
    if let Some(f) = &spec.fridge {
        channels.insert(ApplianceKind::Refrigerator, fridge_trace(f, n, &mut rng));
    }
    if let Some(h) = &spec.heater {
        channels.insert(ApplianceKind::ElectricHeater, heater_trace(h, spec.start_epoch, spec.step, n));
    }
    if let Some(p) = &spec.washer {
        channels.insert(ApplianceKind::WasherDryer, program_trace(p, spec.step, n, &mut rng));
    }
    if let Some(p) = &spec.dishwasher {
        channels.insert(ApplianceKind::Dishwasher, program_trace(p, spec.step, n, &mut rng));
    }
    for values in channels.values_mut() {
        for x in values.iter_mut() {
            *x = round2(*x);
        }
    }
    let base = spec.base.as_ref().map(|b| base_trace(b, n, &mut rng));

    let noise = Normal::new(0.0, spec.noise_sigma_w).expect("validated sigma");
    let mut mains = vec![0.0; n];
    for (t, m) in mains.iter_mut().enumerate() {
        let mut sum: f64 = channels.values().map(|c| c[t]).sum();
        if let Some(b) = &base {
            sum += round2(b[t]);
        }
        if spec.noise_sigma_w > 0.0 {
            sum += noise.sample(&mut rng);
        }
        *m = round2(sum.max(0.0));
    }

    let flexible_energy: f64 = channels.values().flat_map(|c| c.iter()).sum();
    let total_energy: f64 = mains.iter().sum();
    let true_flexible_share_pct = if total_energy > 0.0 {
        100.0 * flexible_energy / total_energy
    } else {
        0.0
    };

    let mut appliances = BTreeMap::new();
    let mut masks = BTreeMap::new();
    let mut policies = BTreeMap::new();
    let mut label_map = BTreeMap::new();
    label_map.insert(1, "mains".to_string());
    label_map.insert(2, "mains".to_string());
    for (i, (kind, values)) in channels.into_iter().enumerate() {
        let series = TimeSeries::new(spec.start_epoch, spec.step, values)?;
        let policy = LabelPolicy::default_for(&kind);
        masks.insert(kind.clone(), label_activation(&series, &policy));
        policies.insert(kind.clone(), policy);
        label_map.insert(3 + i as u32, redd_label(&kind).to_string());
        appliances.insert(kind, series);
    }
    Ok(SynthHouse {
        building: BuildingData {
            building_id: spec.building_id,
            mains: TimeSeries::new(spec.start_epoch, spec.step, mains)?,
            appliances,
            label_map,
        },
        masks,
        policies,
        true_flexible_share_pct,
    })
}

/// Houses `1..=n_houses`, each a [`SynthSpec::household`].
pub fn generate_corpus(n_houses: u32, days: f64, seed: u64) -> Result<Vec<SynthHouse>> {
    (1..=n_houses)
        .map(|id| generate(&SynthSpec::household(id, days), seed))
        .collect()
}

/// Writes a house in the REDD low-frequency layout: two mains phases
/// followed by one channel per appliance.
pub fn write_redd(root: &Path, house: &SynthHouse) -> Result<()> {
    let b = &house.building;
    let epochs: Vec<i64> = (0..b.mains.len()).map(|i| b.mains.epoch_at(i)).collect();
    let with_epochs = |values: &[f64]| -> Vec<(i64, f64)> { epochs.iter().copied().zip(values.iter().copied()).collect() };
    let phase_a: Vec<f64> = b.mains.values().iter().map(|&m| round2(m * PHASE_A_FRACTION)).collect();
    let phase_b: Vec<f64> = b.mains.values().iter().zip(&phase_a).map(|(&m, &a)| m - a).collect();
    let mut channels = vec![
        RawChannel {
            channel: 1,
            label: "mains".into(),
            samples: with_epochs(&phase_a),
        },
        RawChannel {
            channel: 2,
            label: "mains".into(),
            samples: with_epochs(&phase_b),
        },
    ];
    for (i, (kind, series)) in b.appliances.iter().enumerate() {
        channels.push(RawChannel {
            channel: 3 + i as u32,
            label: redd_label(kind).to_string(),
            samples: with_epochs(series.values()),
        });
    }
    write_house(root, b.building_id, &channels)
}
