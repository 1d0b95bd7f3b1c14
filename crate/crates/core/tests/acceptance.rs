//! Acceptance run. Prints one line per criterion and exits non-zero if any fails.
//!
//! Set `NILM_REDD_DIR` to a REDD `low_freq` directory to enable the
//! reproduction check; without it that criterion is reported as skipped.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use nilm_core::classifiers::{AdaBoostModel, KnnModel, NaiveBayesModel, SvmModel, SvmParams};
use nilm_core::config::FeatureMode;
use nilm_core::flex::{self, DecomposeOptions, PowerProfile};
use nilm_core::ingest::{load_houses, BuildingData};
use nilm_core::metrics::{evaluate_experiment, score, ResultTable};
use nilm_core::pipeline::{train_bundle, Manifest, StreamDetector};
use nilm_core::preprocess::build_experiment;
use nilm_core::rbm::{train_from, CdConfig};
use nilm_core::synth::generate_corpus;
use nilm_core::{ApplianceKind, Classifier, Config, Method, Rbm, TimeSeries, WindowMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONDITIONAL_TOL: f64 = 1e-10;
const CONDITIONAL_BUDGET: Duration = Duration::from_secs(1);
const LEARNING_BUDGET: Duration = Duration::from_secs(30);
const LEARNING_MIN_SEEDS: usize = 9;
const CLASSIFIER_BUDGET: Duration = Duration::from_secs(10);
const SMO_EQUALITY_TOL: f64 = 1e-8;
const EASY_ACCURACY: f64 = 90.0;
const RBM_DROP_PTS: f64 = 1.0;
const RBM_MIN_APPLIANCES: usize = 3;
const SYNTH_BUDGET: Duration = Duration::from_secs(300);
const SYNTH_DAYS: f64 = 2.0;
const THROUGHPUT_WINDOWS: usize = 745_868;
const FAST_PREDICT_BUDGET: Duration = Duration::from_secs(10);
const SVM_PREDICT_BUDGET: Duration = Duration::from_secs(60);
const STREAM_MEDIAN_US: f64 = 100.0;

enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn rbm_conditionals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rbm = random_rbm(3, 2, 3.0, &mut rng);
        let e = Enumeration::new(&rbm);
        for (a, v) in e.visible.iter().enumerate() {
            let got = rbm.hidden_probs(v).unwrap();
            for (g, x) in got.iter().zip(e.hidden_conditional(a)) {
                worst = worst.max((g - x).abs());
            }
        }
        for (b, h) in e.hidden.iter().enumerate() {
            let got = rbm.visible_probs(h).unwrap();
            for (g, x) in got.iter().zip(e.visible_conditional(b)) {
                worst = worst.max((g - x).abs());
            }
        }
    }
    let took = start.elapsed();
    verdict(
        worst <= CONDITIONAL_TOL && took < CONDITIONAL_BUDGET,
        format!(
            "50 RBMs (3,2): max abs error {worst:.2e} (tol {CONDITIONAL_TOL:e}), {} (budget {})",
            secs(took),
            secs(CONDITIONAL_BUDGET)
        ),
    )
}

fn rbm_learning() -> Outcome {
    let start = Instant::now();
    let mut improved = 0;
    let mut gains = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let teacher = random_rbm(4, 3, 2.0, &mut rng);
        let rows = Enumeration::new(&teacher).sample_visible(1000, &mut rng);
        let data = WindowMatrix::from_rows(&rows, vec![0; rows.len()]).unwrap();
        let cfg = CdConfig {
            n_hidden: 3,
            epochs: 25,
            seed,
            ..CdConfig::default()
        };
        let init = Rbm::random(4, 3, &mut rng);
        let before = Enumeration::new(&init).log_likelihood(&rows);
        let trained = train_from(init, &data, &cfg, &mut rng).unwrap();
        let after = Enumeration::new(&trained).log_likelihood(&rows);
        if after > before {
            improved += 1;
        }
        gains.push(after - before);
    }
    let took = start.elapsed();
    let min_gain = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        improved >= LEARNING_MIN_SEEDS && took < LEARNING_BUDGET,
        format!(
            "CD-1 raised exact log-likelihood on {improved}/10 seeds (need {LEARNING_MIN_SEEDS}), smallest gain {min_gain:.4} nats, {} (budget {})",
            secs(took),
            secs(LEARNING_BUDGET)
        ),
    )
}

fn blobs(n: usize, width: usize, separation: f64, rng: &mut ChaCha8Rng) -> WindowMatrix {
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 3 == 0) as u8;
        let centre = if y == 1 { separation } else { 0.0 };
        rows.push((0..width).map(|_| centre + rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        labels.push(y);
    }
    WindowMatrix::from_rows(&rows, labels).unwrap()
}

fn classifier_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    let train = blobs(3000, 10, 0.5, &mut rng);
    let knn = KnnModel::train(&train, 5).unwrap();
    let rows: Vec<Vec<f64>> = train.rows().map(<[f64]>::to_vec).collect();
    let mut knn_mismatch = 0;
    for _ in 0..200 {
        let q: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..2.0)).collect();
        let expected = brute_knn(&rows, &q, 5);
        let got: Vec<usize> = knn.neighbours(&q).into_iter().map(|(_, i)| i).collect();
        let votes = expected.iter().filter(|&&i| train.labels()[i] == 1).count();
        if got != expected || knn.predict(&q) != u8::from(votes >= 3) {
            knn_mismatch += 1;
        }
    }
    ok &= knn_mismatch == 0;
    notes.push(format!("knn {knn_mismatch}/200 mismatches"));

    let data = blobs(600, 5, 1.0, &mut rng);
    let svm = SvmModel::train(&data, &SvmParams::default(), true).unwrap();
    let sum: f64 = svm.dual_coefficients().iter().sum();
    let [c_neg, c_pos] = svm.box_bounds();
    let in_box = svm.dual_coefficients().iter().all(|&c| {
        if c > 0.0 {
            c <= c_pos
        } else {
            -c <= c_neg
        }
    });
    ok &= sum.abs() <= SMO_EQUALITY_TOL && in_box;
    notes.push(format!("smo |sum alpha*y| {:.1e}, box {}", sum.abs(), if in_box { "held" } else { "violated" }));

    let noisy = blobs(2000, 6, 0.3, &mut rng);
    let ada = AdaBoostModel::train(&noisy, 50, false).unwrap();
    let worst_round = ada.round_errors().iter().cloned().fold(0.0, f64::max);
    ok &= ada.round_errors().iter().all(|&e| e < 0.5);
    notes.push(format!("adaboost {} rounds, worst error {worst_round:.4}", ada.round_errors().len()));

    let mut constant = blobs(500, 4, 2.0, &mut rng);
    for (i, x) in constant.data_mut().iter_mut().enumerate() {
        if i % 4 == 0 {
            *x = 7.0;
        }
    }
    let nb = NaiveBayesModel::train(&constant, 1e-9).unwrap();
    let finite = constant.rows().all(|r| nb.decision(r).is_finite());
    let correct = constant
        .rows()
        .zip(constant.labels())
        .filter(|(r, &y)| nb.predict(r) == y)
        .count();
    ok &= finite && correct * 10 >= constant.len() * 9;
    notes.push(format!("nb zero-variance feature: finite {finite}, {correct}/{} correct", constant.len()));

    let took = start.elapsed();
    ok &= took < CLASSIFIER_BUDGET;
    notes.push(format!("{} (budget {})", secs(took), secs(CLASSIFIER_BUDGET)));
    verdict(ok, notes.join("; "))
}

fn accuracy_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let n = 10_000;
    let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let agree = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
    let direct = agree as f64 / n as f64;
    let from_matrix = score(&pred, &truth).unwrap().accuracy().unwrap();
    verdict(
        from_matrix == direct,
        format!("confusion-matrix accuracy {from_matrix} vs agreement {direct} on {n} pairs"),
    )
}

fn synthetic_corpus(cfg: &Config) -> Vec<BuildingData> {
    generate_corpus(6, SYNTH_DAYS, cfg.seed)
        .unwrap()
        .into_iter()
        .map(|h| h.building)
        .collect()
}

/// Accuracy in percent; failed cells are `NaN`.
fn pct(table: &ResultTable, kind: &ApplianceKind, method: Method, mode: FeatureMode) -> f64 {
    100.0 * table.accuracy(kind, method, mode).unwrap_or(f64::NAN)
}

fn mean_accuracy(table: &ResultTable, kinds: &[ApplianceKind], methods: &[Method], mode: FeatureMode) -> f64 {
    let mut sum = 0.0;
    for k in kinds {
        for &m in methods {
            sum += pct(table, k, m, mode);
        }
    }
    sum / (kinds.len() * methods.len()) as f64
}

fn synthetic_end_to_end(buildings: &[BuildingData], cfg: &Config) -> Outcome {
    let start = Instant::now();
    let table = match evaluate_experiment(buildings, cfg) {
        Ok(t) => t,
        Err(e) => return verdict(false, format!("evaluation failed: {e}")),
    };
    let took = start.elapsed();
    println!("raw features\n{}", table.pivot(FeatureMode::Raw));
    println!("rbm features\n{}", table.pivot(FeatureMode::Rbm));

    let kinds = &cfg.appliances;
    let methods = &cfg.methods;
    let mut easy_min = f64::INFINITY;
    for kind in [ApplianceKind::ElectricHeater, ApplianceKind::Dishwasher] {
        for &m in methods {
            for mode in [FeatureMode::Raw, FeatureMode::Rbm] {
                easy_min = easy_min.min(pct(&table, &kind, m, mode));
            }
        }
    }
    let raw = mean_accuracy(&table, kinds, methods, FeatureMode::Raw);
    let rbm = mean_accuracy(&table, kinds, methods, FeatureMode::Rbm);
    let holding = kinds
        .iter()
        .filter(|k| {
            let k = std::slice::from_ref(*k);
            mean_accuracy(&table, k, methods, FeatureMode::Rbm)
                >= mean_accuracy(&table, k, methods, FeatureMode::Raw) - RBM_DROP_PTS
        })
        .count();
    verdict(
        easy_min >= EASY_ACCURACY && raw - rbm <= RBM_DROP_PTS && holding >= RBM_MIN_APPLIANCES && took < SYNTH_BUDGET,
        format!(
            "heater/dishwasher min {easy_min:.2}% (need {EASY_ACCURACY}); grid mean raw {raw:.2}% rbm {rbm:.2}% (drop allowed {RBM_DROP_PTS} pt); rbm within {RBM_DROP_PTS} pt on {holding}/{} appliances (need {RBM_MIN_APPLIANCES}); {} (budget {})",
            kinds.len(),
            secs(took),
            secs(SYNTH_BUDGET)
        ),
    )
}

const PUBLISHED_RAW: [[f64; 4]; 4] = [
    [52.18, 67.36, 67.45, 87.13],
    [93.01, 97.79, 98.84, 94.74],
    [92.04, 96.17, 78.27, 95.56],
    [97.52, 98.11, 97.74, 97.77],
];
const PUBLISHED_RBM: [[f64; 4]; 4] = [
    [64.78, 96.72, 84.45, 91.02],
    [99.13, 99.81, 99.86, 99.84],
    [99.14, 97.31, 89.23, 99.27],
    [97.64, 98.43, 98.67, 97.82],
];

fn concat(segments: &[&BuildingData], kind: Option<&ApplianceKind>, step: u32) -> TimeSeries {
    let values = segments
        .iter()
        .flat_map(|s| match kind {
            Some(k) => s.appliances[k].values().to_vec(),
            None => s.mains.values().to_vec(),
        })
        .collect();
    TimeSeries::new(segments[0].mains.start_epoch(), step, values).unwrap()
}

fn redd_reproduction(root: PathBuf, cfg: &Config) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut houses = cfg.train_houses.clone();
    houses.push(cfg.test_house);
    let buildings = match load_houses(&root, &houses, &cfg.resample) {
        Ok(b) => b,
        Err(e) => return verdict(false, format!("loading {}: {e}", root.display())),
    };
    let step = cfg.resample.target_step;
    let house1: Vec<&BuildingData> = buildings.iter().filter(|b| b.building_id == 1).collect();
    let fridge = ApplianceKind::Refrigerator;
    let (mean, std) = flex::appliance_stats(&concat(&house1, Some(&fridge), step)).unwrap();
    let stats_ok = ((mean - 56.41) / 56.41).abs() <= 0.01 && ((std - 86.65) / 86.65).abs() <= 0.01;
    ok &= stats_ok;
    notes.push(format!("fridge mean {mean:.2} std {std:.2}"));

    let mains = concat(&house1, None, step);
    let share = |k: &ApplianceKind| 100.0 * concat(&house1, Some(k), step).sum() / mains.sum();
    let fridge_share = share(&fridge);
    let four: f64 = ApplianceKind::FLEXIBLE.iter().map(share).sum();
    ok &= (fridge_share - 11.72).abs() <= 1.0 && (four - 17.0).abs() <= 2.0;
    notes.push(format!("fridge share {fridge_share:.2}%, four-appliance share {four:.2}%"));

    let mut reports = Vec::new();
    for seg in &house1 {
        let mut detections = std::collections::BTreeMap::new();
        let mut profiles = std::collections::BTreeMap::new();
        for kind in &ApplianceKind::FLEXIBLE {
            if seg.mains.len() < cfg.preprocess.median_k {
                continue;
            }
            detections.insert(kind.clone(), cfg.preprocess.labels(seg, kind).unwrap());
            profiles.insert(kind.clone(), PowerProfile::Channel(seg.appliances[kind].clone()));
        }
        if let Ok(r) = flex::decompose(&seg.mains, &detections, &profiles, DecomposeOptions::default()) {
            reports.push(r);
        }
    }
    let summary = flex::summarize(&reports).unwrap();
    ok &= (summary.mean_daily_flexibility_pct - 23.21).abs() <= 5.0;
    notes.push(format!("mean daily flexibility {:.2}%", summary.mean_daily_flexibility_pct));

    let table = evaluate_experiment(&buildings, cfg).unwrap();
    let mut worst: f64 = 0.0;
    for (a, kind) in ApplianceKind::FLEXIBLE.iter().enumerate() {
        for (m, method) in Method::ALL.iter().enumerate() {
            for (mode, published) in [(FeatureMode::Raw, &PUBLISHED_RAW), (FeatureMode::Rbm, &PUBLISHED_RBM)] {
                let got = pct(&table, kind, *method, mode);
                worst = worst.max((got - published[a][m]).abs());
            }
        }
    }
    ok &= worst <= 5.0;
    notes.push(format!("largest accuracy deviation {worst:.2} pts"));
    verdict(ok, notes.join("; "))
}

fn tile(rows: &WindowMatrix, n: usize) -> WindowMatrix {
    let w = rows.width();
    let mut data = Vec::with_capacity(n * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let r = i % rows.len();
        data.extend_from_slice(rows.row(r));
        labels.push(rows.labels()[r]);
    }
    WindowMatrix::new(w, data, labels).unwrap()
}

fn throughput(buildings: &[BuildingData], cfg: &Config) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let exp = build_experiment(
        buildings,
        &cfg.train_houses,
        cfg.test_house,
        &ApplianceKind::Refrigerator,
        &cfg.preprocess,
    )
    .unwrap();
    let queries = tile(&exp.test, THROUGHPUT_WINDOWS);
    for method in Method::ALL {
        let model = Classifier::train(method, &exp.train, &cfg.classifiers).unwrap();
        let start = Instant::now();
        let pred = model.predict_batch(&queries).unwrap();
        let took = start.elapsed();
        assert_eq!(pred.len(), THROUGHPUT_WINDOWS);
        let budget = if method == Method::Svm {
            SVM_PREDICT_BUDGET
        } else {
            FAST_PREDICT_BUDGET
        };
        ok &= took <= budget;
        notes.push(format!("{method} {} (budget {})", secs(took), secs(budget)));
    }

    let mut stream_cfg = cfg.clone();
    stream_cfg.methods = vec![Method::NaiveBayes, Method::Knn, Method::AdaBoost];
    let bundle = train_bundle(
        buildings,
        &stream_cfg,
        FeatureMode::Raw,
        Manifest::new("acceptance", &stream_cfg, Vec::new()),
    )
    .unwrap();
    let test = buildings.iter().find(|b| b.building_id == cfg.test_house).unwrap();
    for &method in &stream_cfg.methods {
        let mut detector = StreamDetector::new(&bundle, method).unwrap();
        let mut latencies = Vec::with_capacity(test.mains.len());
        for &x in test.mains.values() {
            let start = Instant::now();
            let out = detector.push(x).unwrap();
            let took = start.elapsed();
            if out.is_some() {
                latencies.push(took.as_secs_f64() * 1e6);
            }
        }
        latencies.sort_by(f64::total_cmp);
        let median = latencies[latencies.len() / 2];
        ok &= median <= STREAM_MEDIAN_US;
        notes.push(format!("stream {method} median {median:.1}us"));
    }
    notes.push(format!("{THROUGHPUT_WINDOWS} windows, stream budget {STREAM_MEDIAN_US}us"));
    verdict(ok, notes.join("; "))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let label = match outcome.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skipped => "SKIPPED",
    };
    println!(
        "[{label}] criterion {id} {name} ({}): {}",
        secs(start.elapsed()),
        outcome.detail
    );
    !matches!(outcome.status, Status::Fail)
}

fn main() {
    let cfg = Config::default();
    let mut passed = true;
    passed &= run(1, "rbm conditionals", rbm_conditionals);
    passed &= run(2, "rbm learning signal", rbm_learning);
    passed &= run(3, "classifier oracles", classifier_oracles);
    passed &= run(4, "accuracy metric", accuracy_metric);
    let buildings = synthetic_corpus(&cfg);
    passed &= run(5, "synthetic end-to-end", || synthetic_end_to_end(&buildings, &cfg));
    passed &= run(6, "redd reproduction", || match std::env::var_os("NILM_REDD_DIR") {
        Some(dir) if PathBuf::from(&dir).join("house_1").is_dir() => redd_reproduction(dir.into(), &cfg),
        _ => Outcome {
            status: Status::Skipped,
            detail: "NILM_REDD_DIR not set or has no house_1".into(),
        },
    });
    passed &= run(7, "throughput and latency", || throughput(&buildings, &cfg));
    if !passed {
        std::process::exit(1);
    }
}
