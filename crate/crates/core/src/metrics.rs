//! Scoring, the appliance × method × feature evaluation grid, and
//! hyperparameter search on a held-out training building.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{Classifier, ClassifierParams, Method};
use crate::config::{Config, FeatureMode};
use crate::data::{ApplianceKind, ConfusionMatrix, WindowMatrix};
use crate::error::{NilmError, Result};
use crate::ingest::BuildingData;
use crate::preprocess::{build_experiment, Experiment, Scaler};
use crate::rbm::{self, Rbm};

/// Binary confusion matrix of `predicted` against `truth`.
pub fn score(predicted: &[u8], truth: &[u8]) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(NilmError::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(NilmError::Empty("predictions"));
    }
    let mut cm = ConfusionMatrix::zeros(2);
    for (&p, &t) in predicted.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(NilmError::InvalidParameter(format!(
                "labels must be 0 or 1, got prediction {p} and truth {t}"
            )));
        }
        cm.increment(t as usize, p as usize);
    }
    Ok(cm)
}

/// Summary scores with class 1 ("on") as the positive class. Ratios with a
/// zero denominator are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl BinaryScores {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        if cm.classes() != 2 {
            return Err(NilmError::DimensionMismatch {
                expected: 2,
                actual: cm.classes(),
            });
        }
        let tp = cm.get(1, 1);
        let fp = cm.get(0, 1);
        let fn_ = cm.get(1, 0);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            accuracy: cm.accuracy()?,
            precision,
            recall,
            f1,
        })
    }
}

/// One cell of the evaluation grid. A failed cell keeps its place in the
/// table with `error` set and no scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub appliance: ApplianceKind,
    pub method: Method,
    pub features: FeatureMode,
    pub scores: Option<BinaryScores>,
    pub confusion: Option<[[u64; 2]; 2]>,
    pub train_s: f64,
    pub predict_s: f64,
    pub n_test: usize,
    pub error: Option<String>,
}

impl ResultRow {
    fn failed(appliance: &ApplianceKind, method: Method, features: FeatureMode, err: &str) -> Self {
        Self {
            appliance: appliance.clone(),
            method,
            features,
            scores: None,
            confusion: None,
            train_s: 0.0,
            predict_s: 0.0,
            n_test: 0,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

pub const CSV_HEADER: &str = "appliance,method,features,accuracy,precision,recall,f1,train_s,predict_s,n_test";

impl ResultTable {
    pub fn get(&self, appliance: &ApplianceKind, method: Method, features: FeatureMode) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| &r.appliance == appliance && r.method == method && r.features == features)
    }

    pub fn accuracy(&self, appliance: &ApplianceKind, method: Method, features: FeatureMode) -> Option<f64> {
        self.get(appliance, method, features)?.scores.map(|s| s.accuracy)
    }

    /// Failed cells carry `NaN` scores; the message is in the JSON form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let s = r.scores.unwrap_or(BinaryScores {
                accuracy: f64::NAN,
                precision: f64::NAN,
                recall: f64::NAN,
                f1: f64::NAN,
            });
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{:.3},{}",
                r.appliance, r.method, r.features, s.accuracy, s.precision, s.recall, s.f1,
                r.train_s, r.predict_s, r.n_test
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Accuracy in percent, appliances down and methods across, for one
    /// feature mode.
    pub fn pivot(&self, features: FeatureMode) -> String {
        let mut appliances: Vec<&ApplianceKind> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for r in self.rows.iter().filter(|r| r.features == features) {
            if !appliances.contains(&&r.appliance) {
                appliances.push(&r.appliance);
            }
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let mut out = format!("{:<14}", features.name());
        for m in &methods {
            let _ = write!(out, "{:>10}", m.name());
        }
        out.push('\n');
        for a in appliances {
            let _ = write!(out, "{:<14}", a.name());
            for &m in &methods {
                match self.accuracy(a, m, features) {
                    Some(acc) => {
                        let _ = write!(out, "{:>10.2}", acc * 100.0);
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "error");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// RBM features for an experiment, reusing a model across appliances when
/// the training windows and scaler coincide.
pub struct RbmCache {
    per_appliance: bool,
    models: HashMap<String, Rbm>,
}

impl RbmCache {
    pub fn new(per_appliance: bool) -> Self {
        Self {
            per_appliance,
            models: HashMap::new(),
        }
    }

    pub fn model(&mut self, exp: &Experiment, cfg: &rbm::CdConfig) -> Result<&Rbm> {
        self.model_for(&exp.appliance, &exp.train_buildings, &exp.scaler, &exp.train, cfg)
    }

    /// `train` must already be scaled by `scaler`.
    pub fn model_for(
        &mut self,
        appliance: &ApplianceKind,
        train_buildings: &[u32],
        scaler: &Scaler,
        train: &WindowMatrix,
        cfg: &rbm::CdConfig,
    ) -> Result<&Rbm> {
        let key = if self.per_appliance {
            format!("{appliance}")
        } else {
            format!(
                "{:?}/{:x}/{:x}/{}",
                train_buildings,
                scaler.min_w.to_bits(),
                scaler.max_w.to_bits(),
                train.len()
            )
        };
        if !self.models.contains_key(&key) {
            let mut cfg = cfg.clone();
            if self.per_appliance {
                // Identical inputs would otherwise give identical models.
                let digest = Sha256::digest(appliance.name().as_bytes());
                let mut bytes = [0u8; 8];
                bytes.copy_from_slice(&digest[..8]);
                cfg.seed ^= u64::from_le_bytes(bytes);
            }
            let model = rbm::train(train, &cfg)?;
            self.models.insert(key.clone(), model);
        }
        Ok(&self.models[&key])
    }
}

fn features_for(
    exp: &Experiment,
    mode: FeatureMode,
    cache: &mut RbmCache,
    cfg: &rbm::CdConfig,
) -> Result<(WindowMatrix, WindowMatrix)> {
    match mode {
        FeatureMode::Raw => Ok((exp.train.clone(), exp.test.clone())),
        FeatureMode::Rbm => {
            let model = cache.model(exp, cfg)?;
            Ok((model.extract_features(&exp.train)?, model.extract_features(&exp.test)?))
        }
    }
}

fn run_cell(
    train: &WindowMatrix,
    test: &WindowMatrix,
    method: Method,
    params: &ClassifierParams,
) -> Result<(BinaryScores, [[u64; 2]; 2], f64, f64)> {
    let t0 = Instant::now();
    let model = Classifier::train(method, train, params)?;
    let train_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let predicted = model.predict_batch(test)?;
    let predict_s = t1.elapsed().as_secs_f64();
    let cm = score(&predicted, test.labels())?;
    let confusion = [[cm.get(0, 0), cm.get(0, 1)], [cm.get(1, 0), cm.get(1, 1)]];
    Ok((BinaryScores::from_confusion(&cm)?, confusion, train_s, predict_s))
}

/// Trains and scores every configured appliance × method × feature mode.
/// Each cell is independent: a failure is recorded in that row and the rest
/// of the grid still runs.
pub fn evaluate_experiment(buildings: &[BuildingData], config: &Config) -> Result<ResultTable> {
    config.validate()?;
    let cd = config.rbm_config();
    let mut cache = RbmCache::new(config.rbm_per_appliance);
    let mut rows = Vec::new();
    for appliance in &config.appliances {
        let exp = build_experiment(
            buildings,
            &config.train_houses,
            config.test_house,
            appliance,
            &config.preprocess,
        );
        for &mode in &config.features {
            let feats = exp
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|exp| features_for(exp, mode, &mut cache, &cd).map_err(|e| e.to_string()));
            for &method in &config.methods {
                let row = match &feats {
                    Err(e) => ResultRow::failed(appliance, method, mode, e),
                    Ok((train, test)) => match run_cell(train, test, method, &config.classifiers) {
                        Ok((scores, confusion, train_s, predict_s)) => ResultRow {
                            appliance: appliance.clone(),
                            method,
                            features: mode,
                            scores: Some(scores),
                            confusion: Some(confusion),
                            train_s,
                            predict_s,
                            n_test: test.len(),
                            error: None,
                        },
                        Err(e) => ResultRow::failed(appliance, method, mode, &e.to_string()),
                    },
                };
                log::info!(
                    "{} {} {}: {}",
                    appliance,
                    method,
                    mode,
                    row.scores
                        .map(|s| format!("accuracy {:.4}", s.accuracy))
                        .unwrap_or_else(|| row.error.clone().unwrap_or_default())
                );
                rows.push(row);
            }
        }
    }
    Ok(ResultTable { rows })
}

/// Best setting found for one method on one appliance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub appliance: ApplianceKind,
    pub method: Method,
    pub features: FeatureMode,
    pub setting: String,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub validation_building: u32,
    pub trials: Vec<TuneResult>,
    /// Config lines for the setting with the best mean validation accuracy
    /// across appliances, per method.
    pub suggested: Vec<String>,
}

fn candidate_params(method: Method, base: &ClassifierParams, gamma0: f64) -> Vec<(String, ClassifierParams)> {
    let mut out = Vec::new();
    match method {
        Method::NaiveBayes => {
            for s in [1e-9, 1e-6, 1e-3] {
                let mut p = base.clone();
                p.nb_var_smoothing = s;
                out.push((format!("nb.var_smoothing={s}"), p));
            }
        }
        Method::Knn => {
            for k in [1, 3, 5, 9, 15] {
                let mut p = base.clone();
                p.knn_k = k;
                out.push((format!("knn.k={k}"), p));
            }
        }
        Method::Svm => {
            for c in [0.1, 1.0, 10.0] {
                for g in [0.1, 1.0, 10.0] {
                    let mut p = base.clone();
                    p.svm.c = c;
                    p.svm.gamma = Some(gamma0 * g);
                    out.push((format!("svm.c={c}\nsvm.gamma={}", gamma0 * g), p));
                }
            }
        }
        Method::AdaBoost => {
            for t in [10, 50, 100] {
                let mut p = base.clone();
                p.adaboost_rounds = t;
                out.push((format!("adaboost.rounds={t}"), p));
            }
        }
    }
    out
}

/// Grid search with the last training building held out for validation. The
/// test building is never touched.
pub fn tune(buildings: &[BuildingData], config: &Config) -> Result<TuneReport> {
    config.validate()?;
    let (&validation, fit) = config
        .train_houses
        .split_last()
        .ok_or(NilmError::Empty("training building set"))?;
    if fit.is_empty() {
        return Err(NilmError::InvalidParameter(
            "tuning needs at least two training buildings".into(),
        ));
    }
    let cd = config.rbm_config();
    let mut cache = RbmCache::new(config.rbm_per_appliance);
    let mode = *config.features.first().ok_or(NilmError::Empty("feature modes"))?;
    let mut trials = Vec::new();
    // (method, setting) -> (sum of accuracies, count)
    let mut totals: Vec<(Method, String, f64, usize)> = Vec::new();
    for appliance in &config.appliances {
        let exp = match build_experiment(buildings, fit, validation, appliance, &config.preprocess) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("skipping {appliance} in tuning: {e}");
                continue;
            }
        };
        let (train, val) = features_for(&exp, mode, &mut cache, &cd)?;
        let gamma0 = crate::classifiers::default_gamma(&train);
        for &method in &config.methods {
            let mut best: Option<TuneResult> = None;
            for (setting, params) in candidate_params(method, &config.classifiers, gamma0) {
                let acc = match run_cell(&train, &val, method, &params) {
                    Ok((s, ..)) => s.accuracy,
                    Err(e) => {
                        log::warn!("{appliance} {method} {setting}: {e}");
                        continue;
                    }
                };
                match totals.iter_mut().find(|t| t.0 == method && t.1 == setting) {
                    Some(t) => {
                        t.2 += acc;
                        t.3 += 1;
                    }
                    None => totals.push((method, setting.clone(), acc, 1)),
                }
                if best.as_ref().is_none_or(|b| acc > b.validation_accuracy) {
                    best = Some(TuneResult {
                        appliance: appliance.clone(),
                        method,
                        features: mode,
                        setting,
                        validation_accuracy: acc,
                    });
                }
            }
            trials.extend(best);
        }
    }
    let mut suggested = Vec::new();
    for &method in &config.methods {
        let best = totals
            .iter()
            .filter(|t| t.0 == method)
            .max_by(|a, b| (a.2 / a.3 as f64).total_cmp(&(b.2 / b.3 as f64)));
        if let Some((_, setting, ..)) = best {
            suggested.extend(setting.lines().map(str::to_string));
        }
    }
    Ok(TuneReport {
        validation_building: validation,
        trials,
        suggested,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scores_by_hand() {
        let cm = score(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]).unwrap();
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.get(1, 0), 1);
        assert_eq!(cm.get(0, 0), 1);
        let s = BinaryScores::from_confusion(&cm).unwrap();
        assert_eq!(s.accuracy, 0.6);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(score(&[], &[]).is_err());
        assert!(score(&[1], &[1, 0]).is_err());
        assert!(score(&[2], &[1]).is_err());
        let s = BinaryScores::from_confusion(&score(&[0, 0], &[0, 0]).unwrap()).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn csv_marks_failed_rows() {
        let table = ResultTable {
            rows: vec![ResultRow::failed(
                &ApplianceKind::Dishwasher,
                Method::Svm,
                FeatureMode::Raw,
                &NilmError::SingleClass.to_string(),
            )],
        };
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.next().unwrap().starts_with("dishwasher,svm,raw,NaN,"));
        assert!(table.to_json().unwrap().contains("single class"));
    }

    proptest! {
        #[test]
        fn accuracy_is_agreement(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..300)) {
            let (p, t): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let cm = score(&p, &t).unwrap();
            let agree = p.iter().zip(&t).filter(|(a, b)| a == b).count();
            prop_assert_eq!(cm.total() as usize, p.len());
            prop_assert_eq!(cm.accuracy().unwrap(), agree as f64 / p.len() as f64);
            let s = BinaryScores::from_confusion(&cm).unwrap();
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
