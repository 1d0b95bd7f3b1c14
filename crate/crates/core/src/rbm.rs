//! Restricted Boltzmann machine trained with contrastive divergence.
//!
//! Parameters are a weight matrix `W` (visible x hidden, row-major), visible
//! biases `a` and hidden biases `b`. The energy is bilinear in the two
//! layers, so each layer's units are independent sigmoids given the other.
//!
//! Training follows CD-n: the positive statistics use hidden probabilities
//! driven by the data, the negative statistics come from an `n`-step Gibbs
//! chain started at the data. Hidden units in the chain are sampled as binary
//! states; visible units are carried as probabilities unless
//! [`CdConfig::sample_visible`] is set. Updates use momentum and an L2 decay on
//! the weights only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::WindowMatrix;
use crate::error::{NilmError, Result};

/// Standard deviation of the initial weights.
pub const INIT_WEIGHT_STD: f64 = 0.01;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rbm {
    n_visible: usize,
    n_hidden: usize,
    weights: Vec<f64>,
    visible_bias: Vec<f64>,
    hidden_bias: Vec<f64>,
}

impl Rbm {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            n_visible,
            n_hidden,
            weights: vec![0.0; n_visible * n_hidden],
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
        }
    }

    pub fn from_parts(
        n_visible: usize,
        n_hidden: usize,
        weights: Vec<f64>,
        visible_bias: Vec<f64>,
        hidden_bias: Vec<f64>,
    ) -> Result<Self> {
        let check = |expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(NilmError::DimensionMismatch { expected, actual })
            }
        };
        check(n_visible * n_hidden, weights.len())?;
        check(n_visible, visible_bias.len())?;
        check(n_hidden, hidden_bias.len())?;
        let rbm = Self {
            n_visible,
            n_hidden,
            weights,
            visible_bias,
            hidden_bias,
        };
        if !rbm.is_finite() {
            return Err(NilmError::InvalidParameter("non-finite RBM parameter".into()));
        }
        Ok(rbm)
    }

    /// Weights drawn from a zero-mean normal with standard deviation 0.01, biases zero.
    pub fn random<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid normal");
        let mut rbm = Self::zeros(n_visible, n_hidden);
        for w in &mut rbm.weights {
            *w = normal.sample(rng);
        }
        rbm
    }

    pub fn n_visible(&self) -> usize {
        self.n_visible
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n_hidden + j]
    }

    pub fn visible_bias(&self) -> &[f64] {
        &self.visible_bias
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.hidden_bias
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.visible_bias)
            .chain(&self.hidden_bias)
            .all(|x| x.is_finite())
    }

    /// The same machine with the roles of the two layers swapped.
    pub fn transposed(&self) -> Rbm {
        let mut weights = vec![0.0; self.weights.len()];
        for i in 0..self.n_visible {
            for j in 0..self.n_hidden {
                weights[j * self.n_visible + i] = self.weight(i, j);
            }
        }
        Rbm {
            n_visible: self.n_hidden,
            n_hidden: self.n_visible,
            weights,
            visible_bias: self.hidden_bias.clone(),
            hidden_bias: self.visible_bias.clone(),
        }
    }

    fn check_visible(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_visible {
            return Err(NilmError::DimensionMismatch {
                expected: self.n_visible,
                actual: v.len(),
            });
        }
        Ok(())
    }

    fn check_hidden(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.n_hidden {
            return Err(NilmError::DimensionMismatch {
                expected: self.n_hidden,
                actual: h.len(),
            });
        }
        Ok(())
    }

    pub fn energy(&self, v: &[f64], h: &[f64]) -> Result<f64> {
        self.check_visible(v)?;
        self.check_hidden(h)?;
        let mut interaction = 0.0;
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.n_hidden..(i + 1) * self.n_hidden];
            interaction += vi * row.iter().zip(h).map(|(w, hj)| w * hj).sum::<f64>();
        }
        let visible: f64 = v.iter().zip(&self.visible_bias).map(|(x, a)| x * a).sum();
        let hidden: f64 = h.iter().zip(&self.hidden_bias).map(|(x, b)| x * b).sum();
        Ok(-interaction - visible - hidden)
    }

    /// Unchecked [`Rbm::hidden_probs`] into a caller buffer of length `n_hidden`.
    pub fn hidden_probs_into(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.hidden_bias);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.n_hidden..(i + 1) * self.n_hidden];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += vi * w;
            }
        }
        for x in out.iter_mut() {
            *x = sigmoid(*x);
        }
    }

    fn visible_probs_into(&self, h: &[f64], out: &mut [f64]) {
        for (i, acc) in out.iter_mut().enumerate() {
            let row = &self.weights[i * self.n_hidden..(i + 1) * self.n_hidden];
            let act: f64 = row.iter().zip(h).map(|(w, hj)| w * hj).sum();
            *acc = sigmoid(self.visible_bias[i] + act);
        }
    }

    /// Probability that each hidden unit is on, given the visible layer.
    pub fn hidden_probs(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_visible(v)?;
        let mut out = vec![0.0; self.n_hidden];
        self.hidden_probs_into(v, &mut out);
        Ok(out)
    }

    /// Probability that each visible unit is on, given the hidden layer.
    pub fn visible_probs(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_hidden(h)?;
        let mut out = vec![0.0; self.n_visible];
        self.visible_probs_into(h, &mut out);
        Ok(out)
    }

    /// Row-wise hidden probabilities; labels are carried over.
    pub fn extract_features(&self, rows: &WindowMatrix) -> Result<WindowMatrix> {
        if rows.width() != self.n_visible {
            return Err(NilmError::DimensionMismatch {
                expected: self.n_visible,
                actual: rows.width(),
            });
        }
        let mut data = vec![0.0; rows.len() * self.n_hidden];
        for (row, out) in rows.rows().zip(data.chunks_exact_mut(self.n_hidden)) {
            self.hidden_probs_into(row, out);
        }
        WindowMatrix::new(self.n_hidden, data, rows.labels().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdConfig {
    pub n_hidden: usize,
    /// Gibbs steps per update (the `n` of CD-n).
    pub n_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sample binary visible states in the negative phase instead of carrying
    /// probabilities.
    pub sample_visible: bool,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            n_hidden: 20,
            n_steps: 1,
            learning_rate: 1e-2,
            momentum: 0.5,
            weight_decay: 2e-4,
            epochs: 25,
            batch_size: 100,
            seed: 0,
            sample_visible: false,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NilmError::InvalidParameter(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.n_steps == 0 {
            return bad("at least one Gibbs step is required".into());
        }
        if self.batch_size == 0 || self.n_hidden == 0 {
            return bad("batch size and hidden units must be positive".into());
        }
        Ok(())
    }
}

/// A parameter-shaped bundle: gradients, velocities and phase statistics all use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub visible: Vec<f64>,
    pub hidden: Vec<f64>,
}

pub type Velocity = Gradients;

impl Gradients {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: vec![0.0; n_visible * n_hidden],
            visible: vec![0.0; n_visible],
            hidden: vec![0.0; n_hidden],
        }
    }

    pub fn for_model(rbm: &Rbm) -> Self {
        Self::zeros(rbm.n_visible, rbm.n_hidden)
    }

    fn scale(&mut self, k: f64) {
        for x in self
            .weights
            .iter_mut()
            .chain(self.visible.iter_mut())
            .chain(self.hidden.iter_mut())
        {
            *x *= k;
        }
    }

    /// Adds `v h'`, `v` and `h` into the bundle.
    fn accumulate(&mut self, v: &[f64], h: &[f64], sign: f64) {
        let n_hidden = h.len();
        for (i, &vi) in v.iter().enumerate() {
            let row = &mut self.weights[i * n_hidden..(i + 1) * n_hidden];
            let svi = sign * vi;
            for (acc, hj) in row.iter_mut().zip(h) {
                *acc += svi * hj;
            }
        }
        for (acc, vi) in self.visible.iter_mut().zip(v) {
            *acc += sign * vi;
        }
        for (acc, hj) in self.hidden.iter_mut().zip(h) {
            *acc += sign * hj;
        }
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.flat().zip(other.flat()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .chain(&self.visible)
            .chain(&self.hidden)
            .copied()
    }
}

/// Data-side statistics `<v h'>_0`, `<v>_0`, `<h>_0` using hidden probabilities.
pub fn positive_phase(rbm: &Rbm, batch: &[&[f64]]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(NilmError::Empty("CD batch"));
    }
    let mut stats = Gradients::for_model(rbm);
    let mut h = vec![0.0; rbm.n_hidden];
    for v in batch {
        rbm.check_visible(v)?;
        rbm.hidden_probs_into(v, &mut h);
        stats.accumulate(v, &h, 1.0);
    }
    stats.scale(1.0 / batch.len() as f64);
    Ok(stats)
}

fn sample_into<R: Rng + ?Sized>(probs: &[f64], out: &mut [f64], rng: &mut R) {
    for (o, &p) in out.iter_mut().zip(probs) {
        *o = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
}

/// Batch-averaged CD-n gradient estimate: positive minus negative statistics.
pub fn cd_gradients<R: Rng + ?Sized>(
    rbm: &Rbm,
    batch: &[&[f64]],
    n_steps: usize,
    sample_visible: bool,
    rng: &mut R,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(NilmError::Empty("CD batch"));
    }
    if n_steps == 0 {
        return Err(NilmError::InvalidParameter("at least one Gibbs step is required".into()));
    }
    let (nv, nh) = (rbm.n_visible, rbm.n_hidden);
    let mut grad = Gradients::for_model(rbm);
    let mut h_prob = vec![0.0; nh];
    let mut h_state = vec![0.0; nh];
    let mut v_prob = vec![0.0; nv];
    let mut v_state = vec![0.0; nv];
    for v0 in batch {
        rbm.check_visible(v0)?;
        rbm.hidden_probs_into(v0, &mut h_prob);
        grad.accumulate(v0, &h_prob, 1.0);

        for step in 0..n_steps {
            sample_into(&h_prob, &mut h_state, rng);
            rbm.visible_probs_into(&h_state, &mut v_prob);
            let v = if sample_visible {
                sample_into(&v_prob, &mut v_state, rng);
                &v_state
            } else {
                &v_prob
            };
            rbm.hidden_probs_into(v, &mut h_prob);
            if step + 1 == n_steps {
                grad.accumulate(v, &h_prob, -1.0);
            }
        }
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok(grad)
}

/// One momentum step. The previous step is scaled by the momentum, the
/// learning-rate-scaled gradient (less weight decay, applied to weights only)
/// is added, and the result is applied to the parameters. Nothing is written
/// if the result would be non-finite.
pub fn update_params(
    rbm: &mut Rbm,
    grads: &Gradients,
    velocity: &mut Velocity,
    cfg: &CdConfig,
) -> Result<()> {
    let shape = |g: &Gradients| (g.weights.len(), g.visible.len(), g.hidden.len());
    let expected = (rbm.weights.len(), rbm.n_visible, rbm.n_hidden);
    for actual in [shape(grads), shape(velocity)] {
        if actual != expected {
            return Err(NilmError::DimensionMismatch {
                expected: expected.0 + expected.1 + expected.2,
                actual: actual.0 + actual.1 + actual.2,
            });
        }
    }
    let (alpha, rho, xi) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let step = |theta: &[f64], g: &[f64], vel: &[f64], decay: f64| -> (Vec<f64>, Vec<f64>) {
        let new_vel: Vec<f64> = theta
            .iter()
            .zip(g)
            .zip(vel)
            .map(|((t, g), v)| rho * v + alpha * (g - decay * t))
            .collect();
        let new_theta = theta.iter().zip(&new_vel).map(|(t, d)| t + d).collect();
        (new_theta, new_vel)
    };
    let (w, dw) = step(&rbm.weights, &grads.weights, &velocity.weights, xi);
    let (a, da) = step(&rbm.visible_bias, &grads.visible, &velocity.visible, 0.0);
    let (b, db) = step(&rbm.hidden_bias, &grads.hidden, &velocity.hidden, 0.0);
    if !w.iter().chain(&dw).all(|x| x.is_finite()) {
        return Err(NilmError::Diverged("weights"));
    }
    if !a.iter().chain(&da).chain(&b).chain(&db).all(|x| x.is_finite()) {
        return Err(NilmError::Diverged("biases"));
    }
    rbm.weights = w;
    rbm.visible_bias = a;
    rbm.hidden_bias = b;
    velocity.weights = dw;
    velocity.visible = da;
    velocity.hidden = db;
    Ok(())
}

/// Trains a fresh machine on unlabelled rows scaled to `[0, 1]`.
///
/// The result is a deterministic function of the row order and `cfg`: the
/// seed drives initialisation, the per-epoch shuffle and all Gibbs sampling.
pub fn train(rows: &WindowMatrix, cfg: &CdConfig) -> Result<Rbm> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Rbm::random(rows.width(), cfg.n_hidden, &mut rng);
    train_from(init, rows, cfg, &mut rng)
}

/// Continues training from `rbm`.
pub fn train_from<R: Rng + ?Sized>(
    mut rbm: Rbm,
    rows: &WindowMatrix,
    cfg: &CdConfig,
    rng: &mut R,
) -> Result<Rbm> {
    cfg.validate()?;
    if rows.width() != rbm.n_visible {
        return Err(NilmError::DimensionMismatch {
            expected: rbm.n_visible,
            actual: rows.width(),
        });
    }
    if cfg.epochs == 0 {
        return Ok(rbm);
    }
    if rows.is_empty() {
        return Err(NilmError::Empty("RBM training rows"));
    }
    let mut velocity = Velocity::for_model(&rbm);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut batch: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows.row(i)));
            let grads = cd_gradients(&rbm, &batch, cfg.n_steps, cfg.sample_visible, rng)?;
            update_params(&mut rbm, &grads, &mut velocity, cfg)?;
        }
        log::debug!(
            "rbm epoch {}/{}: reconstruction error {:.6}",
            epoch + 1,
            cfg.epochs,
            reconstruction_error(&rbm, rows)
        );
    }
    Ok(rbm)
}

/// Mean squared error of one deterministic up-down pass, over at most 1000 rows.
pub fn reconstruction_error(rbm: &Rbm, rows: &WindowMatrix) -> f64 {
    let sample = rows.thinned(1000);
    if sample.is_empty() {
        return 0.0;
    }
    let mut h = vec![0.0; rbm.n_hidden];
    let mut v = vec![0.0; rbm.n_visible];
    let mut total = 0.0;
    for row in sample.rows() {
        rbm.hidden_probs_into(row, &mut h);
        rbm.visible_probs_into(&h, &mut v);
        total += row.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    total / (sample.len() * rbm.n_visible) as f64
}

pub const RBM_FORMAT_VERSION: u32 = 1;

/// On-disk form of a trained machine together with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedRbm {
    pub version: u32,
    pub rbm: Rbm,
    pub config: CdConfig,
}

impl SavedRbm {
    pub fn new(rbm: Rbm, config: CdConfig) -> Self {
        Self {
            version: RBM_FORMAT_VERSION,
            rbm,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let saved: SavedRbm = serde_json::from_str(text)?;
        if saved.version != RBM_FORMAT_VERSION {
            return Err(NilmError::Config(format!(
                "unsupported RBM format version {}",
                saved.version
            )));
        }
        let r = saved.rbm;
        let rbm = Rbm::from_parts(r.n_visible, r.n_hidden, r.weights, r.visible_bias, r.hidden_bias)?;
        Ok(SavedRbm { rbm, ..saved })
    }
}
