use serde::{Deserialize, Serialize};

use super::class_counts;
use crate::data::WindowMatrix;
use crate::error::{NilmError, Result};

/// Gaussian naive Bayes with per-class, per-feature mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    width: usize,
    log_prior: [f64; 2],
    mean: [Vec<f64>; 2],
    var: [Vec<f64>; 2],
    var_floor: f64,
}

impl NaiveBayesModel {
    /// Variances are floored at `var_smoothing` times the largest per-feature
    /// variance of the whole training set (or `var_smoothing` itself when every
    /// feature is constant).
    pub fn train(data: &WindowMatrix, var_smoothing: f64) -> Result<Self> {
        if !(var_smoothing > 0.0) {
            return Err(NilmError::InvalidParameter("variance smoothing must be positive".into()));
        }
        let (neg, pos) = class_counts(data)?;
        let d = data.width();
        let counts = [neg as f64, pos as f64];
        let mut mean = [vec![0.0; d], vec![0.0; d]];
        let mut overall_mean = vec![0.0; d];
        for (row, &label) in data.rows().zip(data.labels()) {
            let c = label as usize;
            for k in 0..d {
                mean[c][k] += row[k];
                overall_mean[k] += row[k];
            }
        }
        for c in 0..2 {
            for m in &mut mean[c] {
                *m /= counts[c];
            }
        }
        for m in &mut overall_mean {
            *m /= data.len() as f64;
        }

        let mut var = [vec![0.0; d], vec![0.0; d]];
        let mut overall_var = vec![0.0; d];
        for (row, &label) in data.rows().zip(data.labels()) {
            let c = label as usize;
            for k in 0..d {
                var[c][k] += (row[k] - mean[c][k]).powi(2);
                overall_var[k] += (row[k] - overall_mean[k]).powi(2);
            }
        }
        let max_var = overall_var
            .iter()
            .map(|v| v / data.len() as f64)
            .fold(0.0, f64::max);
        let var_floor = if max_var > 0.0 {
            var_smoothing * max_var
        } else {
            var_smoothing
        };
        for c in 0..2 {
            for v in &mut var[c] {
                *v = (*v / counts[c]).max(var_floor);
            }
        }
        let n = data.len() as f64;
        Ok(Self {
            width: d,
            log_prior: [(counts[0] / n).ln(), (counts[1] / n).ln()],
            mean,
            var,
            var_floor,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn var_floor(&self) -> f64 {
        self.var_floor
    }

    fn log_joint(&self, c: usize, x: &[f64]) -> f64 {
        let ll: f64 = x
            .iter()
            .zip(&self.mean[c])
            .zip(&self.var[c])
            .map(|((xi, m), v)| {
                -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (xi - m).powi(2) / (2.0 * v)
            })
            .sum();
        self.log_prior[c] + ll
    }

    /// Log-posterior ratio `log p(on | x) - log p(off | x)`.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.log_joint(1, x) - self.log_joint(0, x)
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        (self.decision(x) > 0.0) as u8
    }
}
