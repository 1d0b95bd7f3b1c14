use serde::{Deserialize, Serialize};

use super::class_counts;
use crate::data::WindowMatrix;
use crate::error::{NilmError, Result};

/// Rounds whose weighted error reaches `0.5 - STOP_MARGIN` end training.
const STOP_MARGIN: f64 = 1e-10;
const MIN_ERROR: f64 = 1e-12;

/// Depth-one threshold rule: `polarity` if `x[feature] > threshold`, else `-polarity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub polarity: i8,
}

impl Stump {
    #[inline]
    pub fn vote(&self, x: &[f64]) -> f64 {
        let p = self.polarity as f64;
        if x[self.feature] > self.threshold {
            p
        } else {
            -p
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaBoostModel {
    width: usize,
    stumps: Vec<Stump>,
    alphas: Vec<f64>,
    round_errors: Vec<f64>,
    /// Weighted-majority label, used only when no stump was accepted.
    fallback: u8,
}

impl AdaBoostModel {
    pub fn train(data: &WindowMatrix, rounds: usize, class_weighted: bool) -> Result<Self> {
        if rounds == 0 {
            return Err(NilmError::InvalidParameter("AdaBoost needs at least one round".into()));
        }
        let (neg, pos) = class_counts(data)?;
        let n = data.len();
        let d = data.width();
        let y: Vec<f64> = data.labels().iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let mut w: Vec<f64> = if class_weighted {
            data.labels()
                .iter()
                .map(|&l| 0.5 / if l == 1 { pos } else { neg } as f64)
                .collect()
        } else {
            vec![1.0 / n as f64; n]
        };
        let positive_mass: f64 = w.iter().zip(&y).filter(|(_, &yi)| yi > 0.0).map(|(wi, _)| wi).sum();
        let fallback = (positive_mass > 0.5) as u8;

        let sorted: Vec<Vec<usize>> = (0..d)
            .map(|f| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| data.row(a)[f].total_cmp(&data.row(b)[f]));
                idx
            })
            .collect();

        let mut model = Self {
            width: d,
            stumps: Vec::new(),
            alphas: Vec::new(),
            round_errors: Vec::new(),
            fallback,
        };
        for _ in 0..rounds {
            let stump = best_stump(data, &y, &w, &sorted);
            // Exact weighted error of the chosen rule.
            let err: f64 = data
                .rows()
                .zip(&y)
                .zip(&w)
                .filter(|((x, &yi), _)| stump.vote(x) != yi)
                .map(|(_, wi)| wi)
                .sum::<f64>()
                .clamp(0.0, 1.0);
            if err >= 0.5 - STOP_MARGIN {
                break;
            }
            let floored = err.max(MIN_ERROR);
            let alpha = 0.5 * ((1.0 - floored) / floored).ln();
            model.stumps.push(stump);
            model.alphas.push(alpha);
            model.round_errors.push(err);
            if err <= MIN_ERROR {
                break;
            }
            let mut total = 0.0;
            for ((x, &yi), wi) in data.rows().zip(&y).zip(w.iter_mut()) {
                *wi *= (-alpha * yi * stump.vote(x)).exp();
                total += *wi;
            }
            for wi in &mut w {
                *wi /= total;
            }
        }
        Ok(model)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stumps(&self) -> &[Stump] {
        &self.stumps
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Weighted error of each accepted round's stump.
    pub fn round_errors(&self) -> &[f64] {
        &self.round_errors
    }

    /// `prod_t 2 sqrt(e_t (1 - e_t))` over the first `rounds` rounds.
    pub fn training_error_bound(&self, rounds: usize) -> f64 {
        self.round_errors
            .iter()
            .take(rounds)
            .map(|e| 2.0 * (e * (1.0 - e)).sqrt())
            .product()
    }

    /// The ensemble truncated to its first `rounds` stumps.
    pub fn truncated(&self, rounds: usize) -> AdaBoostModel {
        let k = rounds.min(self.stumps.len());
        AdaBoostModel {
            width: self.width,
            stumps: self.stumps[..k].to_vec(),
            alphas: self.alphas[..k].to_vec(),
            round_errors: self.round_errors[..k].to_vec(),
            fallback: self.fallback,
        }
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        if self.stumps.is_empty() {
            return if self.fallback == 1 { 1.0 } else { -1.0 };
        }
        self.stumps
            .iter()
            .zip(&self.alphas)
            .map(|(s, a)| a * s.vote(x))
            .sum()
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        (self.decision(x) > 0.0) as u8
    }
}

/// Exhaustive search over features, midpoint thresholds and both polarities.
fn best_stump(data: &WindowMatrix, y: &[f64], w: &[f64], sorted: &[Vec<usize>]) -> Stump {
    let total: f64 = w.iter().sum();
    let neg_mass: f64 = w.iter().zip(y).filter(|(_, &yi)| yi < 0.0).map(|(wi, _)| wi).sum();
    let mut best = (f64::INFINITY, Stump { feature: 0, threshold: f64::NEG_INFINITY, polarity: 1 });
    let consider = |err_plus: f64, feature: usize, threshold: f64, best: &mut (f64, Stump)| {
        let err_minus = total - err_plus;
        if err_plus < best.0 {
            *best = (err_plus, Stump { feature, threshold, polarity: 1 });
        }
        if err_minus < best.0 {
            *best = (err_minus, Stump { feature, threshold, polarity: -1 });
        }
    };
    for (f, order) in sorted.iter().enumerate() {
        let value = |k: usize| data.row(order[k])[f];
        // Threshold below every value: polarity +1 calls everything "on".
        let mut err_plus = neg_mass;
        consider(err_plus, f, value(0) - 1.0, &mut best);
        for k in 0..order.len() - 1 {
            let i = order[k];
            err_plus += if y[i] > 0.0 { w[i] } else { -w[i] };
            let (a, b) = (value(k), value(k + 1));
            if a < b {
                consider(err_plus, f, a + (b - a) / 2.0, &mut best);
            }
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn accuracy(model: &AdaBoostModel, data: &WindowMatrix) -> f64 {
        let ok = data.rows().zip(data.labels()).filter(|(x, &l)| model.predict(x) == l).count();
        ok as f64 / data.len() as f64
    }

    /// XOR labels with unequal quadrant masses (40/10 on, 25/25 off), so no
    /// single stump is right on more than 65% while an additive model can get 90%.
    fn xor(n: usize, seed: u64) -> WindowMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let u: f64 = rng.random();
            let (sx, sy) = match u {
                u if u < 0.40 => (1.0, 1.0),
                u if u < 0.50 => (-1.0, -1.0),
                u if u < 0.75 => (1.0, -1.0),
                _ => (-1.0, 1.0),
            };
            let x = sx * rng.random_range(0.01..1.0);
            let y = sy * rng.random_range(0.01..1.0);
            data.extend_from_slice(&[x, y]);
            labels.push((sx == sy) as u8);
        }
        WindowMatrix::new(2, data, labels).unwrap()
    }

    #[test]
    fn threshold_separable_in_one_round() {
        let data = WindowMatrix::new(1, vec![0.1, 0.4, 0.2, 0.8, 0.9, 0.7], vec![0, 0, 0, 1, 1, 1])
            .unwrap();
        let model = AdaBoostModel::train(&data, 50, false).unwrap();
        assert_eq!(model.stumps().len(), 1);
        assert_eq!(model.round_errors()[0], 0.0);
        assert_eq!(accuracy(&model, &data), 1.0);
        assert!((model.stumps()[0].threshold - 0.55).abs() < 1e-12);
    }

    #[test]
    fn bound_is_non_increasing_and_errors_below_half() {
        let data = xor(400, 3);
        let model = AdaBoostModel::train(&data, 50, false).unwrap();
        assert!(!model.round_errors().is_empty());
        let mut prev = 1.0;
        for t in 1..=model.round_errors().len() {
            assert!(model.round_errors()[t - 1] < 0.5);
            let bound = model.training_error_bound(t);
            assert!(bound <= prev);
            prev = bound;
            let train_err = 1.0 - accuracy(&model.truncated(t), &data);
            assert!(train_err <= bound + 1e-12);
        }
    }

    #[test]
    fn xor_ensemble_beats_single_stump() {
        let train = xor(600, 7);
        let test = xor(2000, 8);
        let single = AdaBoostModel::train(&train, 1, false).unwrap();
        let ensemble = AdaBoostModel::train(&train, 50, false).unwrap();
        let single_acc = accuracy(&single, &test);
        let ensemble_acc = accuracy(&ensemble, &test);
        assert!(single_acc <= 0.75, "single stump {single_acc}");
        assert!(ensemble_acc > single_acc, "ensemble {ensemble_acc} vs {single_acc}");
    }

    #[test]
    fn class_weighting_changes_initial_mass() {
        let mut labels = vec![0u8; 95];
        labels.extend([1u8; 5]);
        let data = WindowMatrix::new(1, (0..100).map(|i| (i % 10) as f64).collect(), labels).unwrap();
        let plain = AdaBoostModel::train(&data, 5, false).unwrap();
        let weighted = AdaBoostModel::train(&data, 5, true).unwrap();
        assert_ne!(plain, weighted);
        assert!(AdaBoostModel::train(&data, 0, false).is_err());
    }
}
