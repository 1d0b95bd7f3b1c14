//! Binary appliance-state classifiers behind one train/predict surface.

mod adaboost;
mod knn;
mod naive_bayes;
mod svm;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowMatrix;
use crate::error::{NilmError, Result};

pub use adaboost::{AdaBoostModel, Stump};
pub use knn::KnnModel;
pub use naive_bayes::NaiveBayesModel;
pub use svm::{default_gamma, stratified_thin, SvmModel, SvmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NaiveBayes,
    Knn,
    Svm,
    AdaBoost,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NaiveBayes, Method::Knn, Method::Svm, Method::AdaBoost];

    pub fn name(self) -> &'static str {
        match self {
            Method::NaiveBayes => "nb",
            Method::Knn => "knn",
            Method::Svm => "svm",
            Method::AdaBoost => "adaboost",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = NilmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nb" | "naive_bayes" | "naivebayes" => Ok(Method::NaiveBayes),
            "knn" => Ok(Method::Knn),
            "svm" => Ok(Method::Svm),
            "adaboost" | "ab" => Ok(Method::AdaBoost),
            other => Err(NilmError::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Hyperparameters for all four families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub knn_k: usize,
    pub svm: SvmParams,
    pub adaboost_rounds: usize,
    /// Naive Bayes variance floor as a fraction of the largest feature variance.
    pub nb_var_smoothing: f64,
    /// Reweight classes inversely to their frequency (SVM and AdaBoost only).
    pub class_weighted: bool,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            knn_k: 5,
            svm: SvmParams::default(),
            adaboost_rounds: 50,
            nb_var_smoothing: 1e-9,
            class_weighted: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Classifier {
    NaiveBayes(NaiveBayesModel),
    Knn(KnnModel),
    Svm(SvmModel),
    AdaBoost(AdaBoostModel),
}

impl Classifier {
    pub fn train(method: Method, data: &WindowMatrix, params: &ClassifierParams) -> Result<Self> {
        Ok(match method {
            Method::NaiveBayes => {
                Classifier::NaiveBayes(NaiveBayesModel::train(data, params.nb_var_smoothing)?)
            }
            Method::Knn => Classifier::Knn(KnnModel::train(data, params.knn_k)?),
            Method::Svm => {
                Classifier::Svm(SvmModel::train(data, &params.svm, params.class_weighted)?)
            }
            Method::AdaBoost => Classifier::AdaBoost(AdaBoostModel::train(
                data,
                params.adaboost_rounds,
                params.class_weighted,
            )?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Classifier::NaiveBayes(_) => Method::NaiveBayes,
            Classifier::Knn(_) => Method::Knn,
            Classifier::Svm(_) => Method::Svm,
            Classifier::AdaBoost(_) => Method::AdaBoost,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Classifier::NaiveBayes(m) => m.width(),
            Classifier::Knn(m) => m.width(),
            Classifier::Svm(m) => m.width(),
            Classifier::AdaBoost(m) => m.width(),
        }
    }

    fn check(&self, width: usize) -> Result<()> {
        if width != self.width() {
            return Err(NilmError::DimensionMismatch {
                expected: self.width(),
                actual: width,
            });
        }
        Ok(())
    }

    /// Real-valued score; positive means "on".
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        self.check(x.len())?;
        Ok(match self {
            Classifier::NaiveBayes(m) => m.decision(x),
            Classifier::Knn(m) => m.decision(x),
            Classifier::Svm(m) => m.decision(x),
            Classifier::AdaBoost(m) => m.decision(x),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        self.check(x.len())?;
        Ok(self.predict_unchecked(x))
    }

    fn predict_unchecked(&self, x: &[f64]) -> u8 {
        match self {
            Classifier::NaiveBayes(m) => m.predict(x),
            Classifier::Knn(m) => m.predict(x),
            Classifier::Svm(m) => m.predict(x),
            Classifier::AdaBoost(m) => m.predict(x),
        }
    }

    /// Row-wise [`Classifier::predict`], partitioned across worker threads.
    pub fn predict_batch(&self, rows: &WindowMatrix) -> Result<Vec<u8>> {
        self.check(rows.width())?;
        if let Classifier::Knn(m) = self {
            m.index();
            // Blocks of consecutive windows, each searched with warm starts.
            return Ok(rows
                .data()
                .par_chunks(rows.width() * 4096)
                .flat_map_iter(|block| m.predict_run(block))
                .collect());
        }
        Ok(rows
            .data()
            .par_chunks_exact(rows.width())
            .with_min_len(256)
            .map(|x| self.predict_unchecked(x))
            .collect())
    }
}

/// Counts of (negative, positive) labels; errors unless both are present.
pub(crate) fn class_counts(data: &WindowMatrix) -> Result<(usize, usize)> {
    let pos = data.positives();
    let neg = data.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(NilmError::SingleClass);
    }
    Ok((neg, pos))
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
