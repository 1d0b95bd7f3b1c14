//! Trained model bundles and the detectors that apply them, in batch and
//! one sample at a time.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{Classifier, Method};
use crate::config::{Config, FeatureMode};
use crate::data::{ApplianceKind, WindowMatrix};
use crate::error::{NilmError, Result};
use crate::flex::mean_on_power;
use crate::ingest::BuildingData;
use crate::metrics::RbmCache;
use crate::preprocess::{make_windows, median_filter_values, training_windows, CausalMedian, Scaler};
use crate::rbm::{Rbm, SavedRbm};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Everything needed to turn an aggregate signal into classifier inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub mode: FeatureMode,
    pub window: usize,
    pub median_k: usize,
    pub filter_aggregate: bool,
    pub step: u32,
    pub scaler: Scaler,
    /// SHA-256 of the RBM parameters, for RBM features.
    pub rbm_digest: Option<String>,
}

impl FeatureSpace {
    pub fn describe(&self) -> String {
        let mut s = format!(
            "{}(window={}, median_k={}{}, step={}s, scale=[{}, {}] W",
            self.mode,
            self.window,
            self.median_k,
            if self.filter_aggregate { "" } else { " unused" },
            self.step,
            self.scaler.min_w,
            self.scaler.max_w
        );
        if let Some(d) = &self.rbm_digest {
            s.push_str(&format!(", rbm={}", &d[..d.len().min(12)]));
        }
        s.push(')');
        s
    }

    /// Checks the preprocessing a caller intends to apply against the one the
    /// model was trained with. The scaler and RBM travel with the model and
    /// are not compared.
    pub fn check_request(&self, mode: FeatureMode, window: usize, median_k: usize, filter_aggregate: bool, step: u32) -> Result<()> {
        let requested = FeatureSpace {
            mode,
            window,
            median_k,
            filter_aggregate,
            step,
            scaler: self.scaler,
            rbm_digest: self.rbm_digest.clone(),
        };
        if requested != *self {
            return Err(NilmError::FeatureSpaceMismatch {
                expected: self.describe(),
                actual: requested.describe(),
            });
        }
        Ok(())
    }

    pub fn feature_width(&self, rbm: Option<&Rbm>) -> usize {
        match (self.mode, rbm) {
            (FeatureMode::Rbm, Some(r)) => r.n_hidden(),
            _ => self.window,
        }
    }
}

pub fn rbm_digest(rbm: &Rbm) -> Result<String> {
    let json = serde_json::to_vec(rbm)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApplianceModel {
    pub appliance: ApplianceKind,
    pub feature_space: FeatureSpace,
    /// Mean metered draw while on, over the training buildings.
    pub mean_on_power_w: f64,
    pub train_buildings: Vec<u32>,
    pub classifiers: Vec<Classifier>,
}

impl ApplianceModel {
    pub fn classifier(&self, method: Method) -> Option<&Classifier> {
        self.classifiers.iter().find(|c| c.method() == method)
    }
}

/// Provenance written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &Config, inputs: Vec<String>) -> Self {
        Self {
            tool: "nilm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: config.digest(),
            config: config.to_text(),
            seed: config.seed,
            inputs,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub manifest: Manifest,
    /// Keyed by [`rbm_digest`].
    pub rbms: BTreeMap<String, SavedRbm>,
    pub appliances: Vec<ApplianceModel>,
}

impl ModelBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(BUNDLE_FORMAT_VERSION)) {
            return Err(NilmError::InvalidParameter(format!(
                "unsupported model bundle version {version:?}, expected {BUNDLE_FORMAT_VERSION}"
            )));
        }
        let bundle: ModelBundle = serde_json::from_value(value)?;
        bundle.check()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| NilmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NilmError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Internal consistency: RBM references resolve and widths line up.
    fn check(&self) -> Result<()> {
        for m in &self.appliances {
            let rbm = self.rbm_for(&m.feature_space)?;
            if let Some(r) = rbm {
                if r.n_visible() != m.feature_space.window {
                    return Err(NilmError::DimensionMismatch {
                        expected: m.feature_space.window,
                        actual: r.n_visible(),
                    });
                }
            }
            let width = m.feature_space.feature_width(rbm);
            for c in &m.classifiers {
                if c.width() != width {
                    return Err(NilmError::FeatureSpaceMismatch {
                        expected: m.feature_space.describe(),
                        actual: format!("{} classifier over {} inputs", c.method(), c.width()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn rbm_for(&self, space: &FeatureSpace) -> Result<Option<&Rbm>> {
        match (&space.mode, &space.rbm_digest) {
            (FeatureMode::Raw, None) => Ok(None),
            (FeatureMode::Rbm, Some(d)) => self
                .rbms
                .get(d)
                .map(|s| Some(&s.rbm))
                .ok_or_else(|| NilmError::InvalidParameter(format!("bundle lacks RBM {d}"))),
            _ => Err(NilmError::InvalidParameter(format!(
                "inconsistent feature space {}",
                space.describe()
            ))),
        }
    }

    pub fn appliance(&self, kind: &ApplianceKind) -> Option<&ApplianceModel> {
        self.appliances.iter().find(|m| &m.appliance == kind)
    }

    /// Shared preprocessing parameters; every appliance must agree on them.
    pub fn front_end(&self) -> Result<(usize, usize, bool, u32)> {
        let first = self
            .appliances
            .first()
            .ok_or(NilmError::Empty("model bundle"))?;
        let f = &first.feature_space;
        let key = (f.window, f.median_k, f.filter_aggregate, f.step);
        for m in &self.appliances[1..] {
            let g = &m.feature_space;
            if (g.window, g.median_k, g.filter_aggregate, g.step) != key {
                return Err(NilmError::FeatureSpaceMismatch {
                    expected: f.describe(),
                    actual: g.describe(),
                });
            }
        }
        Ok(key)
    }
}

/// Fits the scaler, the RBM when `mode` asks for one, and every configured
/// classifier, for each configured appliance.
pub fn train_bundle(
    buildings: &[BuildingData],
    config: &Config,
    mode: FeatureMode,
    manifest: Manifest,
) -> Result<ModelBundle> {
    config.validate()?;
    let cd = config.rbm_config();
    let pre = &config.preprocess;
    let mut cache = RbmCache::new(config.rbm_per_appliance);
    let mut rbms = BTreeMap::new();
    let mut appliances = Vec::new();
    for kind in &config.appliances {
        let (mut train, used) = training_windows(buildings, &config.train_houses, kind, pre)?;
        let scaler = Scaler::fit_rows(&train)?;
        scaler.apply(&mut train);

        let mut rbm_digest_value = None;
        if mode == FeatureMode::Rbm {
            let rbm = cache.model_for(kind, &used, &scaler, &train, &cd)?.clone();
            let digest = rbm_digest(&rbm)?;
            train = rbm.extract_features(&train)?;
            rbms.entry(digest.clone())
                .or_insert_with(|| SavedRbm::new(rbm, cd.clone()));
            rbm_digest_value = Some(digest);
        }

        let mut on_values = Vec::new();
        let mut on_labels = Vec::new();
        for b in buildings.iter().filter(|b| used.contains(&b.building_id)) {
            on_values.extend_from_slice(b.appliance(kind)?.values());
            on_labels.extend(pre.labels(b, kind)?);
        }
        let mean_on_power_w = mean_on_power(&on_values, &on_labels)?;

        let mut classifiers = Vec::new();
        for &method in &config.methods {
            log::info!("training {method} for {kind} on {} windows", train.len());
            classifiers.push(Classifier::train(method, &train, &config.classifiers)?);
        }
        appliances.push(ApplianceModel {
            appliance: kind.clone(),
            feature_space: FeatureSpace {
                mode,
                window: pre.window,
                median_k: pre.median_k,
                filter_aggregate: pre.filter_aggregate,
                step: config.resample.target_step,
                scaler,
                rbm_digest: rbm_digest_value,
            },
            mean_on_power_w,
            train_buildings: used,
            classifiers,
        });
    }
    let bundle = ModelBundle {
        version: BUNDLE_FORMAT_VERSION,
        manifest,
        rbms,
        appliances,
    };
    bundle.check()?;
    Ok(bundle)
}

/// Per-appliance detections for samples `offset..` of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub offset: usize,
    pub on: BTreeMap<ApplianceKind, Vec<u8>>,
}

impl Detections {
    /// Masks of length `n`, off before the first complete window.
    pub fn padded(&self, n: usize) -> BTreeMap<ApplianceKind, Vec<u8>> {
        self.on
            .iter()
            .map(|(k, v)| {
                let mut full = vec![0u8; self.offset.min(n)];
                full.extend_from_slice(v);
                full.resize(n, 0);
                (k.clone(), full)
            })
            .collect()
    }
}

/// Detections over a whole recorded aggregate.
pub fn detect_batch(bundle: &ModelBundle, method: Method, aggregate: &[f64]) -> Result<Detections> {
    let (window, median_k, filter, _) = bundle.front_end()?;
    let offset = window - 1;
    let mut on = BTreeMap::new();
    if aggregate.len() < window.max(median_k) {
        for m in &bundle.appliances {
            on.insert(m.appliance.clone(), Vec::new());
        }
        return Ok(Detections { offset, on });
    }
    let signal = if filter {
        median_filter_values(aggregate, median_k)?
    } else {
        aggregate.to_vec()
    };
    let raw = make_windows(&signal, &vec![0; signal.len()], window)?;
    for m in &bundle.appliances {
        let clf = m.classifier(method).ok_or_else(|| {
            NilmError::InvalidParameter(format!("bundle has no {method} model for {}", m.appliance))
        })?;
        let mut rows = raw.clone();
        m.feature_space.scaler.apply(&mut rows);
        let rows: WindowMatrix = match bundle.rbm_for(&m.feature_space)? {
            Some(rbm) => rbm.extract_features(&rows)?,
            None => rows,
        };
        on.insert(m.appliance.clone(), clf.predict_batch(&rows)?);
    }
    Ok(Detections { offset, on })
}

struct StreamModel<'a> {
    appliance: &'a ApplianceKind,
    scaler: Scaler,
    rbm: Option<&'a Rbm>,
    classifier: &'a Classifier,
}

/// Sample-at-a-time detector. It keeps only the causal median state and the
/// last `window` filtered values, so each output depends on past input only.
pub struct StreamDetector<'a> {
    models: Vec<StreamModel<'a>>,
    median: Option<CausalMedian>,
    window: usize,
    buffer: VecDeque<f64>,
    scaled: Vec<f64>,
    hidden: Vec<f64>,
}

impl<'a> StreamDetector<'a> {
    pub fn new(bundle: &'a ModelBundle, method: Method) -> Result<Self> {
        let (window, median_k, filter, _) = bundle.front_end()?;
        let mut models = Vec::new();
        let mut max_hidden = 0;
        for m in &bundle.appliances {
            let classifier = m.classifier(method).ok_or_else(|| {
                NilmError::InvalidParameter(format!("bundle has no {method} model for {}", m.appliance))
            })?;
            let rbm = bundle.rbm_for(&m.feature_space)?;
            max_hidden = max_hidden.max(rbm.map_or(0, Rbm::n_hidden));
            if let Classifier::Knn(k) = classifier {
                k.index();
            }
            models.push(StreamModel {
                appliance: &m.appliance,
                scaler: m.feature_space.scaler,
                rbm,
                classifier,
            });
        }
        Ok(Self {
            models,
            median: if filter { Some(CausalMedian::new(median_k)?) } else { None },
            window,
            buffer: VecDeque::with_capacity(window),
            scaled: vec![0.0; window],
            hidden: vec![0.0; max_hidden],
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Feeds one sample; returns per-appliance states once a full window is
    /// buffered.
    pub fn push(&mut self, watts: f64) -> Result<Option<Vec<(&'a ApplianceKind, u8)>>> {
        if !watts.is_finite() {
            return Err(NilmError::InvalidSeries(format!("non-finite sample {watts}")));
        }
        let x = match &mut self.median {
            Some(m) => m.push(watts),
            None => watts,
        };
        if self.buffer.len() == self.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(x);
        if self.buffer.len() < self.window {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(self.models.len());
        for m in &self.models {
            for (s, &v) in self.scaled.iter_mut().zip(&self.buffer) {
                *s = m.scaler.scale(v);
            }
            let state = match m.rbm {
                Some(rbm) => {
                    let h = &mut self.hidden[..rbm.n_hidden()];
                    rbm.hidden_probs_into(&self.scaled, h);
                    m.classifier.predict(h)?
                }
                None => m.classifier.predict(&self.scaled)?,
            };
            out.push((m.appliance, state));
        }
        Ok(Some(out))
    }
}
