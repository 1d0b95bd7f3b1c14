//! Flat `key=value` experiment configuration.
//!
//! Every key has a default; a config file only lists the keys it changes.
//! Lines starting with `#` are comments. [`Config::to_text`] writes the full
//! canonical key set, which is also what [`Config::digest`] hashes.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{ClassifierParams, Method};
use crate::data::{ApplianceKind, LabelPolicy};
use crate::error::{NilmError, Result};
use crate::ingest::ResampleOptions;
use crate::preprocess::PreprocessConfig;
use crate::rbm::CdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Raw,
    Rbm,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Raw => "raw",
            FeatureMode::Rbm => "rbm",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMode {
    type Err = NilmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "raw" => Ok(FeatureMode::Raw),
            "rbm" => Ok(FeatureMode::Rbm),
            other => Err(NilmError::Config(format!("unknown feature mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub preprocess: PreprocessConfig,
    pub resample: ResampleOptions,
    pub rbm: CdConfig,
    pub rbm_per_appliance: bool,
    pub classifiers: ClassifierParams,
    pub train_houses: Vec<u32>,
    pub test_house: u32,
    pub appliances: Vec<ApplianceKind>,
    pub methods: Vec<Method>,
    pub features: Vec<FeatureMode>,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            resample: ResampleOptions::default(),
            rbm: CdConfig::default(),
            rbm_per_appliance: false,
            classifiers: ClassifierParams::default(),
            train_houses: vec![2, 3, 4, 5, 6],
            test_house: 1,
            appliances: ApplianceKind::FLEXIBLE.to_vec(),
            methods: Method::ALL.to_vec(),
            features: vec![FeatureMode::Raw, FeatureMode::Rbm],
            seed: 42,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| NilmError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(NilmError::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

/// `2,3,4` or `2..6` (inclusive).
pub fn parse_houses(value: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: u32 = parse("houses", lo)?;
            let hi: u32 = parse("houses", hi.trim_start_matches('='))?;
            if hi < lo {
                return Err(NilmError::Config(format!("empty house range {part:?}")));
            }
            out.extend(lo..=hi);
        } else {
            out.push(parse("houses", part)?);
        }
    }
    Ok(out)
}

fn list<T, F: Fn(&str) -> Result<T>>(value: &str, f: F) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(f)
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                NilmError::Config(format!("line {}: expected key=value, got {line:?}", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    /// Applies one override; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.preprocess;
        match key {
            "window" => p.window = parse(key, value)?,
            "median_k" => p.median_k = parse(key, value)?,
            "scaling" => {
                if value != "minmax" {
                    return Err(NilmError::Config(format!("scaling: only minmax is supported, got {value:?}")));
                }
            }
            "causal" => {
                if !parse_bool(key, value)? {
                    return Err(NilmError::Config("causal: look-ahead windows are not supported".into()));
                }
            }
            "filter_aggregate" => p.filter_aggregate = parse_bool(key, value)?,
            "filter_appliances" => p.filter_appliances = parse_bool(key, value)?,
            "allow_missing_appliance" => p.allow_missing_appliance = parse_bool(key, value)?,
            "step" => self.resample.target_step = parse(key, value)?,
            "gap_limit" => self.resample.gap_limit = parse(key, value)?,
            "strict_gaps" => self.resample.strict_gaps = parse_bool(key, value)?,
            "rbm.hidden" => self.rbm.n_hidden = parse(key, value)?,
            "rbm.cd_steps" => self.rbm.n_steps = parse(key, value)?,
            "rbm.learning_rate" => self.rbm.learning_rate = parse(key, value)?,
            "rbm.momentum" => self.rbm.momentum = parse(key, value)?,
            "rbm.weight_decay" => self.rbm.weight_decay = parse(key, value)?,
            "rbm.epochs" => self.rbm.epochs = parse(key, value)?,
            "rbm.batch_size" => self.rbm.batch_size = parse(key, value)?,
            "rbm.sample_visible" => self.rbm.sample_visible = parse_bool(key, value)?,
            "rbm.per_appliance" => self.rbm_per_appliance = parse_bool(key, value)?,
            "knn.k" => self.classifiers.knn_k = parse(key, value)?,
            "svm.c" => self.classifiers.svm.c = parse(key, value)?,
            "svm.gamma" => {
                self.classifiers.svm.gamma = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "svm.tol" => self.classifiers.svm.tol = parse(key, value)?,
            "svm.max_iter" => self.classifiers.svm.max_iter = parse(key, value)?,
            "svm.max_train" => self.classifiers.svm.max_train_rows = parse(key, value)?,
            "adaboost.rounds" => self.classifiers.adaboost_rounds = parse(key, value)?,
            "nb.var_smoothing" => self.classifiers.nb_var_smoothing = parse(key, value)?,
            "class_weighted" => self.classifiers.class_weighted = parse_bool(key, value)?,
            "train_houses" => self.train_houses = parse_houses(value)?,
            "test_house" => self.test_house = parse(key, value)?,
            "appliances" => self.appliances = list(value, |s| Ok(ApplianceKind::from_label(s)))?,
            "methods" => self.methods = list(value, str::parse)?,
            "features" => self.features = list(value, str::parse)?,
            "seed" => self.seed = parse(key, value)?,
            _ => {
                if let Some(name) = key.strip_prefix("threshold.") {
                    let kind = ApplianceKind::from_label(name);
                    let mut policy = self.preprocess.policy(&kind);
                    policy.on_threshold_watts = parse(key, value)?;
                    self.set_policy(kind, policy)?;
                } else if let Some(name) = key.strip_prefix("min_on.") {
                    let kind = ApplianceKind::from_label(name);
                    let mut policy = self.preprocess.policy(&kind);
                    policy.min_on_duration_steps = parse(key, value)?;
                    self.set_policy(kind, policy)?;
                } else {
                    return Err(NilmError::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Stores only policies that differ from the appliance default, so that
    /// equal configs compare equal however they were written.
    fn set_policy(&mut self, kind: ApplianceKind, policy: LabelPolicy) -> Result<()> {
        policy.validate()?;
        if policy == LabelPolicy::default_for(&kind) {
            self.preprocess.label_policies.remove(&kind);
        } else {
            self.preprocess.label_policies.insert(kind, policy);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.preprocess.window == 0 || self.preprocess.median_k == 0 {
            return Err(NilmError::Config("window and median_k must be positive".into()));
        }
        if self.train_houses.contains(&self.test_house) {
            return Err(NilmError::Config(format!(
                "test house {} is also a training house",
                self.test_house
            )));
        }
        self.rbm.validate()
    }

    /// RBM settings with the run seed folded in.
    pub fn rbm_config(&self) -> CdConfig {
        CdConfig {
            seed: self.seed,
            ..self.rbm.clone()
        }
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.preprocess;
        let c = &self.classifiers;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("window", p.window.to_string());
        kv("median_k", p.median_k.to_string());
        kv("scaling", "minmax".into());
        kv("causal", "true".into());
        kv("filter_aggregate", p.filter_aggregate.to_string());
        kv("filter_appliances", p.filter_appliances.to_string());
        kv("allow_missing_appliance", p.allow_missing_appliance.to_string());
        for kind in &self.appliances {
            let policy: LabelPolicy = p.policy(kind);
            kv(&format!("threshold.{kind}"), policy.on_threshold_watts.to_string());
            kv(&format!("min_on.{kind}"), policy.min_on_duration_steps.to_string());
        }
        kv("step", self.resample.target_step.to_string());
        kv("gap_limit", self.resample.gap_limit.to_string());
        kv("strict_gaps", self.resample.strict_gaps.to_string());
        kv("rbm.hidden", self.rbm.n_hidden.to_string());
        kv("rbm.cd_steps", self.rbm.n_steps.to_string());
        kv("rbm.learning_rate", self.rbm.learning_rate.to_string());
        kv("rbm.momentum", self.rbm.momentum.to_string());
        kv("rbm.weight_decay", self.rbm.weight_decay.to_string());
        kv("rbm.epochs", self.rbm.epochs.to_string());
        kv("rbm.batch_size", self.rbm.batch_size.to_string());
        kv("rbm.sample_visible", self.rbm.sample_visible.to_string());
        kv("rbm.per_appliance", self.rbm_per_appliance.to_string());
        kv("knn.k", c.knn_k.to_string());
        kv("svm.c", c.svm.c.to_string());
        kv("svm.gamma", c.svm.gamma.map_or("auto".into(), |g| g.to_string()));
        kv("svm.tol", c.svm.tol.to_string());
        kv("svm.max_iter", c.svm.max_iter.to_string());
        kv("svm.max_train", c.svm.max_train_rows.to_string());
        kv("adaboost.rounds", c.adaboost_rounds.to_string());
        kv("nb.var_smoothing", c.nb_var_smoothing.to_string());
        kv("class_weighted", c.class_weighted.to_string());
        kv("train_houses", join(&self.train_houses));
        kv("test_house", self.test_house.to_string());
        kv("appliances", join(&self.appliances));
        kv("methods", join(&self.methods));
        kv("features", join(&self.features));
        kv("seed", self.seed.to_string());
        out
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
