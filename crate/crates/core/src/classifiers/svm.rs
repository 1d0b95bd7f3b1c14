//! RBF-kernel support vector machine trained by sequential minimal optimisation.
//!
//! The solver works on the dual
//!
//! ```text
//! min  1/2 a'Qa - e'a    s.t.  y'a = 0,  0 <= a_i <= C_i,   Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! picking the working pair with second-order information and updating the two
//! multipliers analytically. Kernel rows are cached in a small LRU.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{class_counts, squared_distance};
use crate::data::WindowMatrix;
use crate::error::{NilmError, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// `None` means `1 / (d * var(features))`.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Kernel rows kept in the LRU cache.
    pub cache_rows: usize,
    /// Stratified even-stride subsample applied before training; 0 keeps everything.
    pub max_train_rows: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_iter: 1_000_000,
            cache_rows: 4096,
            max_train_rows: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    width: usize,
    gamma: f64,
    /// Box bounds for the negative and positive class.
    c: [f64; 2],
    support: Vec<f64>,
    /// `alpha_i * y_i` per support vector.
    coef: Vec<f64>,
    bias: f64,
    iterations: usize,
}

/// `1 / (d * var)` over all feature entries, falling back to `1 / d`.
pub fn default_gamma(data: &WindowMatrix) -> f64 {
    let values = data.data();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let d = data.width() as f64;
    if var > 0.0 {
        1.0 / (d * var)
    } else {
        1.0 / d
    }
}

/// Keeps at most `max_rows` rows, thinning each class by even stride in
/// proportion to its size (at least one row per class).
pub fn stratified_thin(data: &WindowMatrix, max_rows: usize) -> WindowMatrix {
    if max_rows == 0 || data.len() <= max_rows {
        return data.clone();
    }
    let n = data.len() as f64;
    let mut keep = Vec::with_capacity(max_rows);
    for class in [0u8, 1] {
        let members: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let quota = ((max_rows as f64 * members.len() as f64 / n).round() as usize).clamp(1, members.len());
        let stride = members.len() as f64 / quota as f64;
        keep.extend((0..quota).map(|q| members[(q as f64 * stride) as usize]));
    }
    keep.sort_unstable();
    data.subset(&keep)
}

struct KernelCache<'a> {
    data: &'a [f64],
    width: usize,
    n: usize,
    gamma: f64,
    capacity: usize,
    rows: HashMap<usize, (Rc<Vec<f64>>, u64)>,
    clock: u64,
}

impl<'a> KernelCache<'a> {
    fn new(data: &'a [f64], width: usize, gamma: f64, capacity: usize) -> Self {
        Self {
            data,
            width,
            n: data.len() / width,
            gamma,
            capacity: capacity.max(2),
            rows: HashMap::new(),
            clock: 0,
        }
    }

    fn x(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    fn row(&mut self, i: usize) -> Rc<Vec<f64>> {
        self.clock += 1;
        let clock = self.clock;
        if let Some((row, stamp)) = self.rows.get_mut(&i) {
            *stamp = clock;
            return Rc::clone(row);
        }
        if self.rows.len() >= self.capacity {
            let oldest = self
                .rows
                .iter()
                .min_by_key(|(_, (_, stamp))| *stamp)
                .map(|(&k, _)| k)
                .expect("cache is non-empty");
            self.rows.remove(&oldest);
        }
        let xi = self.x(i);
        let row: Vec<f64> = (0..self.n)
            .map(|t| (-self.gamma * squared_distance(xi, self.x(t))).exp())
            .collect();
        let row = Rc::new(row);
        self.rows.insert(i, (Rc::clone(&row), clock));
        row
    }
}

impl SvmModel {
    pub fn train(data: &WindowMatrix, params: &SvmParams, class_weighted: bool) -> Result<Self> {
        if !(params.c > 0.0) {
            return Err(NilmError::InvalidParameter(format!("C must be positive, got {}", params.c)));
        }
        if let Some(g) = params.gamma {
            if !(g > 0.0) {
                return Err(NilmError::InvalidParameter(format!("gamma must be positive, got {g}")));
            }
        }
        if !(params.tol > 0.0) {
            return Err(NilmError::InvalidParameter("tolerance must be positive".into()));
        }
        class_counts(data)?;
        let data = stratified_thin(data, params.max_train_rows);
        let (neg, pos) = class_counts(&data)?;
        let gamma = params.gamma.unwrap_or_else(|| default_gamma(&data));
        let c = if class_weighted {
            let n = data.len() as f64;
            [params.c * n / (2.0 * neg as f64), params.c * n / (2.0 * pos as f64)]
        } else {
            [params.c; 2]
        };

        let n = data.len();
        let y: Vec<f64> = data.labels().iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let bound: Vec<f64> = data.labels().iter().map(|&l| c[l as usize]).collect();
        let mut alpha = vec![0.0; n];
        let mut grad = vec![-1.0; n];
        let mut cache = KernelCache::new(data.data(), data.width(), gamma, params.cache_rows);

        let up = |t: usize, alpha: &[f64]| {
            (y[t] > 0.0 && alpha[t] < bound[t]) || (y[t] < 0.0 && alpha[t] > 0.0)
        };
        let low = |t: usize, alpha: &[f64]| {
            (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < bound[t])
        };

        let mut iterations = 0;
        loop {
            // First index: maximal violation among the "up" set.
            let mut g_max = f64::NEG_INFINITY;
            let mut i_sel = None;
            for t in 0..n {
                if up(t, &alpha) {
                    let v = -y[t] * grad[t];
                    if v >= g_max {
                        g_max = v;
                        i_sel = Some(t);
                    }
                }
            }
            let Some(i) = i_sel else { break };
            let k_i = cache.row(i);

            // Second index: largest guaranteed objective decrease.
            let mut g_min = f64::INFINITY;
            let mut best = f64::INFINITY;
            let mut j_sel = None;
            for t in 0..n {
                if !low(t, &alpha) {
                    continue;
                }
                let v = -y[t] * grad[t];
                g_min = g_min.min(v);
                let b = g_max - v;
                if b > 0.0 {
                    let a = (2.0 - 2.0 * k_i[t]).max(TAU);
                    let obj = -(b * b) / a;
                    if obj <= best {
                        best = obj;
                        j_sel = Some(t);
                    }
                }
            }
            if g_max - g_min < params.tol {
                break;
            }
            let Some(j) = j_sel else { break };
            if iterations >= params.max_iter {
                let violations = count_violations(&alpha, &grad, &y, &bound, params.tol);
                return Err(NilmError::NotConverged {
                    iterations,
                    violations,
                });
            }
            iterations += 1;
            let k_j = cache.row(j);

            let (old_i, old_j) = (alpha[i], alpha[j]);
            let (ci, cj) = (bound[i], bound[j]);
            let k_ij = k_i[j];
            if y[i] != y[j] {
                let quad = (2.0 - 2.0 * k_ij).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > ci - cj {
                    if alpha[i] > ci {
                        alpha[i] = ci;
                        alpha[j] = ci - diff;
                    }
                } else if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = cj + diff;
                }
            } else {
                let quad = (2.0 - 2.0 * k_ij).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > ci {
                    if alpha[i] > ci {
                        alpha[i] = ci;
                        alpha[j] = sum - ci;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > cj {
                    if alpha[j] > cj {
                        alpha[j] = cj;
                        alpha[i] = sum - cj;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let d_i = alpha[i] - old_i;
            let d_j = alpha[j] - old_j;
            for t in 0..n {
                grad[t] += y[t] * (y[i] * k_i[t] * d_i + y[j] * k_j[t] * d_j);
            }
        }

        for (a, &cb) in alpha.iter_mut().zip(&bound) {
            *a = a.clamp(0.0, cb);
        }

        // Bias from free multipliers, or the midpoint of the feasible interval.
        let mut free_sum = 0.0;
        let mut free = 0usize;
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..n {
            let yg = y[t] * grad[t];
            if alpha[t] > 0.0 && alpha[t] < bound[t] {
                free_sum += yg;
                free += 1;
            } else if (alpha[t] >= bound[t] && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
        let rho = if free > 0 {
            free_sum / free as f64
        } else {
            (ub + lb) / 2.0
        };

        let mut support = Vec::new();
        let mut coef = Vec::new();
        for t in 0..n {
            if alpha[t] > 0.0 {
                support.extend_from_slice(data.row(t));
                coef.push(alpha[t] * y[t]);
            }
        }
        log::debug!(
            "svm: {iterations} SMO iterations, {} support vectors of {n}",
            coef.len()
        );
        Ok(Self {
            width: data.width(),
            gamma,
            c,
            support,
            coef,
            bias: -rho,
            iterations,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Box bound for the negative and positive class.
    pub fn box_bounds(&self) -> [f64; 2] {
        self.c
    }

    /// `alpha_i * y_i` for every support vector.
    pub fn dual_coefficients(&self) -> &[f64] {
        &self.coef
    }

    pub fn support_vectors(&self) -> std::slice::ChunksExact<'_, f64> {
        self.support.chunks_exact(self.width)
    }

    pub fn n_support(&self) -> usize {
        self.coef.len()
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        (-self.gamma * squared_distance(a, b)).exp()
    }

    /// `sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij` (the maximisation form).
    pub fn dual_objective(&self) -> f64 {
        let svs: Vec<&[f64]> = self.support_vectors().collect();
        let linear: f64 = self.coef.iter().map(|c| c.abs()).sum();
        let mut quad = 0.0;
        for (i, xi) in svs.iter().enumerate() {
            for (j, xj) in svs.iter().enumerate() {
                quad += self.coef[i] * self.coef[j] * self.kernel(xi, xj);
            }
        }
        linear - 0.5 * quad
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .support_vectors()
            .zip(&self.coef)
            .map(|(sv, c)| c * self.kernel(sv, x))
            .sum();
        s + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        (self.decision(x) > 0.0) as u8
    }
}

fn count_violations(alpha: &[f64], grad: &[f64], y: &[f64], bound: &[f64], tol: f64) -> usize {
    let n = alpha.len();
    let up = |t: usize| (y[t] > 0.0 && alpha[t] < bound[t]) || (y[t] < 0.0 && alpha[t] > 0.0);
    let low = |t: usize| (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < bound[t]);
    let g_max = (0..n).filter(|&t| up(t)).map(|t| -y[t] * grad[t]).fold(f64::NEG_INFINITY, f64::max);
    let g_min = (0..n).filter(|&t| low(t)).map(|t| -y[t] * grad[t]).fold(f64::INFINITY, f64::min);
    (0..n)
        .filter(|&t| {
            let v = -y[t] * grad[t];
            (up(t) && v > g_min + tol) || (low(t) && v < g_max - tol)
        })
        .count()
}
