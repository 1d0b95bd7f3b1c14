use std::collections::BTreeMap;

use nilm_core::flex::{decompose, DecomposeOptions, PowerProfile};
use nilm_core::synth::{generate, BaseLoadSpec, SynthSpec};

/// A house whose constant base load is sized so the four appliances draw
/// exactly 30% of the energy.
fn thirty_percent_house() -> nilm_core::synth::SynthHouse {
    let mut spec = SynthSpec::household(3, 1.0);
    spec.noise_sigma_w = 0.0;
    spec.fridge.as_mut().unwrap().standby_w = 0.0;
    spec.washer.as_mut().unwrap().standby_w = 0.0;
    spec.dishwasher.as_mut().unwrap().standby_w = 0.0;
    spec.base = None;
    let bare = generate(&spec, 11).unwrap();
    let flexible: f64 = bare.building.appliances.values().map(|s| s.sum()).sum();
    let mean_flexible = flexible / spec.n_steps as f64;
    spec.base = Some(BaseLoadSpec {
        mean_w: mean_flexible * 0.7 / 0.3,
        sigma_w: 0.0,
        reversion: 0.0,
        max_w: 1e6,
    });
    generate(&spec, 11).unwrap()
}

#[test]
fn ground_truth_detections_recover_constructed_share() {
    let house = thirty_percent_house();
    assert!((house.true_flexible_share_pct - 30.0).abs() < 0.01, "{}", house.true_flexible_share_pct);
    let profiles: BTreeMap<_, _> = house
        .building
        .appliances
        .iter()
        .map(|(k, s)| (k.clone(), PowerProfile::Channel(s.clone())))
        .collect();
    let report = decompose(&house.building.mains, &house.masks, &profiles, DecomposeOptions::default()).unwrap();
    assert!((report.flexibility_pct - 30.0).abs() <= 0.1, "{}", report.flexibility_pct);
    assert_eq!(report.clamped_steps, 0);
}

#[test]
fn removing_an_appliance_from_detections_lowers_the_share() {
    let house = thirty_percent_house();
    let profiles: BTreeMap<_, _> = house
        .building
        .appliances
        .iter()
        .map(|(k, s)| (k.clone(), PowerProfile::Channel(s.clone())))
        .collect();
    let full = decompose(&house.building.mains, &house.masks, &profiles, DecomposeOptions::default()).unwrap();
    let heater = nilm_core::ApplianceKind::ElectricHeater;
    let mut masks = house.masks.clone();
    masks.remove(&heater);
    let partial = decompose(&house.building.mains, &masks, &profiles, DecomposeOptions::default()).unwrap();
    let heater_share = 100.0 * house.building.appliances[&heater].sum() / house.building.mains.sum();
    assert!((full.flexibility_pct - partial.flexibility_pct - heater_share).abs() < 1e-6);
}
