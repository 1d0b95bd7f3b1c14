//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use nilm_core::Rbm;
use rand::Rng;

/// Every binary vector of length `n`, bit `i` of the index as element `i`.
pub fn binary_states(n: usize) -> Vec<Vec<f64>> {
    (0..1usize << n)
        .map(|s| (0..n).map(|i| ((s >> i) & 1) as f64).collect())
        .collect()
}

/// Negative energy, written out from the parameters directly.
pub fn neg_energy(rbm: &Rbm, v: &[f64], h: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..rbm.n_visible() {
        s += rbm.visible_bias()[i] * v[i];
        for j in 0..rbm.n_hidden() {
            s += v[i] * rbm.weight(i, j) * h[j];
        }
    }
    for j in 0..rbm.n_hidden() {
        s += rbm.hidden_bias()[j] * h[j];
    }
    s
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub struct Enumeration {
    pub visible: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    /// Joint probability of each visible state (rows) with each hidden state (columns).
    pub joint: Vec<Vec<f64>>,
    pub log_z: f64,
}

impl Enumeration {
    pub fn new(rbm: &Rbm) -> Self {
        let visible = binary_states(rbm.n_visible());
        let hidden = binary_states(rbm.n_hidden());
        let scores: Vec<Vec<f64>> = visible
            .iter()
            .map(|v| hidden.iter().map(|h| neg_energy(rbm, v, h)).collect())
            .collect();
        let log_z = log_sum_exp(scores.iter().flatten().copied());
        let joint = scores
            .iter()
            .map(|row| row.iter().map(|s| (s - log_z).exp()).collect())
            .collect();
        Self {
            visible,
            hidden,
            joint,
            log_z,
        }
    }

    pub fn marginal_v(&self, a: usize) -> f64 {
        self.joint[a].iter().sum()
    }

    pub fn marginal_h(&self, b: usize) -> f64 {
        self.joint.iter().map(|row| row[b]).sum()
    }

    /// Hidden-unit on probabilities given visible state `a`.
    pub fn hidden_conditional(&self, a: usize) -> Vec<f64> {
        let pv = self.marginal_v(a);
        (0..self.hidden[0].len())
            .map(|j| {
                self.hidden
                    .iter()
                    .zip(&self.joint[a])
                    .filter(|(h, _)| h[j] == 1.0)
                    .map(|(_, p)| p)
                    .sum::<f64>()
                    / pv
            })
            .collect()
    }

    /// Visible-unit on probabilities given hidden state `b`.
    pub fn visible_conditional(&self, b: usize) -> Vec<f64> {
        let ph = self.marginal_h(b);
        (0..self.visible[0].len())
            .map(|i| {
                self.visible
                    .iter()
                    .zip(&self.joint)
                    .filter(|(v, _)| v[i] == 1.0)
                    .map(|(_, row)| row[b])
                    .sum::<f64>()
                    / ph
            })
            .collect()
    }

    pub fn index_of(&self, v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .map(|(i, &x)| (x as usize) << i)
            .sum()
    }

    /// Mean log-likelihood of binary data rows.
    pub fn log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        data.iter()
            .map(|v| self.marginal_v(self.index_of(v)).ln())
            .sum::<f64>()
            / data.len() as f64
    }

    /// Exact samples from the visible marginal.
    pub fn sample_visible<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let probs: Vec<f64> = (0..self.visible.len()).map(|a| self.marginal_v(a)).collect();
        (0..n)
            .map(|_| {
                let mut u: f64 = rng.random();
                let mut pick = probs.len() - 1;
                for (a, p) in probs.iter().enumerate() {
                    if u < *p {
                        pick = a;
                        break;
                    }
                    u -= p;
                }
                self.visible[pick].clone()
            })
            .collect()
    }
}

/// Exact gradient of the mean log-likelihood of `data`, flattened as
/// weights (row-major), visible biases, hidden biases.
pub fn exact_gradient(rbm: &Rbm, data: &[Vec<f64>]) -> Vec<f64> {
    let e = Enumeration::new(rbm);
    let (nv, nh) = (rbm.n_visible(), rbm.n_hidden());
    let mut data_w = vec![0.0; nv * nh];
    let mut data_a = vec![0.0; nv];
    let mut data_b = vec![0.0; nh];
    for v in data {
        let ph = e.hidden_conditional(e.index_of(v));
        for i in 0..nv {
            data_a[i] += v[i];
            for j in 0..nh {
                data_w[i * nh + j] += v[i] * ph[j];
            }
        }
        for j in 0..nh {
            data_b[j] += ph[j];
        }
    }
    let n = data.len() as f64;
    let mut model_w = vec![0.0; nv * nh];
    let mut model_a = vec![0.0; nv];
    let mut model_b = vec![0.0; nh];
    for (v, row) in e.visible.iter().zip(&e.joint) {
        for (h, p) in e.hidden.iter().zip(row) {
            for i in 0..nv {
                model_a[i] += p * v[i];
                for j in 0..nh {
                    model_w[i * nh + j] += p * v[i] * h[j];
                }
            }
            for j in 0..nh {
                model_b[j] += p * h[j];
            }
        }
    }
    data_w
        .iter()
        .zip(&model_w)
        .chain(data_a.iter().zip(&model_a))
        .chain(data_b.iter().zip(&model_b))
        .map(|(d, m)| d / n - m)
        .collect()
}

/// Flattened parameters in the same order as [`exact_gradient`].
pub fn flat_params(rbm: &Rbm) -> Vec<f64> {
    rbm.weights()
        .iter()
        .chain(rbm.visible_bias())
        .chain(rbm.hidden_bias())
        .copied()
        .collect()
}

pub fn with_flat_params(rbm: &Rbm, theta: &[f64]) -> Rbm {
    let (nv, nh) = (rbm.n_visible(), rbm.n_hidden());
    Rbm::from_parts(
        nv,
        nh,
        theta[..nv * nh].to_vec(),
        theta[nv * nh..nv * nh + nv].to_vec(),
        theta[nv * nh + nv..].to_vec(),
    )
    .unwrap()
}

/// Parameters uniform in `[-scale, scale]`.
pub fn random_rbm<R: Rng>(nv: usize, nh: usize, scale: f64, rng: &mut R) -> Rbm {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..=scale)).collect() };
    let w = draw(nv * nh);
    let a = draw(nv);
    let b = draw(nh);
    Rbm::from_parts(nv, nh, w, a, b).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Brute-force k nearest neighbours, ties broken by index.
pub fn brute_knn(train: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, x)| (x.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}
