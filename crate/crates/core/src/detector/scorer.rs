//! Logistic scorer trained with focal loss under k:1 negative resampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::seeds;
use crate::{Error, Result};

/// Probability floor applied to `p_t` during training.
pub const TRAIN_EPS: f64 = 1e-12;

/// `-(1 - p_t)^γ · ln(p_t)`.
pub fn focal_loss(p_t: f64, gamma: f64) -> Result<f64> {
    if !(p_t > 0.0 && p_t <= 1.0) {
        return Err(Error::Domain(format!("focal loss needs 0 < p_t <= 1, got {p_t}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("focal loss needs gamma >= 0, got {gamma}")));
    }
    Ok(-(1.0 - p_t).powf(gamma) * p_t.ln())
}

/// Training label after resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Unselected negative (`-1`): no loss, no gradient.
    Ignore,
    Negative,
    Positive,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        match self {
            Label::Ignore => -1,
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

/// Keeps every positive and a uniform random subset of `min(k·P, N)`
/// negatives (`min(k, N)` when there are no positives); the remaining
/// negatives become [`Label::Ignore`].
pub fn resample_labels(is_positive: &[bool], k: usize, seed: u64) -> Vec<Label> {
    let negatives: Vec<usize> = (0..is_positive.len()).filter(|&i| !is_positive[i]).collect();
    let n_pos = is_positive.len() - negatives.len();
    let quota = if n_pos == 0 { k } else { k.saturating_mul(n_pos) };
    let take = quota.min(negatives.len());

    let mut labels: Vec<Label> = is_positive
        .iter()
        .map(|&p| if p { Label::Positive } else { Label::Ignore })
        .collect();
    let mut rng = seeds::rng(seed, "resample", 0);
    for j in index::sample(&mut rng, negatives.len(), take) {
        labels[negatives[j]] = Label::Negative;
    }
    labels
}

/// [`resample_labels`] over `(sample, is_positive)` pairs.
pub fn resample_batch<T: Clone>(samples: &[(T, bool)], k: usize, seed: u64) -> Vec<(T, Label)> {
    let flags: Vec<bool> = samples.iter().map(|s| s.1).collect();
    samples
        .iter()
        .zip(resample_labels(&flags, k, seed))
        .map(|((x, _), l)| (x.clone(), l))
        .collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
}

/// Mean focal loss of `sigmoid(w·x + b)` over non-ignored samples and its gradient.
///
/// Ignored samples are skipped outright, so their features never enter the sum.
pub fn focal_objective(
    weights: &[f64],
    bias: f64,
    gamma: f64,
    xs: &[Vec<f64>],
    labels: &[Label],
) -> Objective {
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    let mut n = 0usize;
    let ln_eps = TRAIN_EPS.ln();
    for (x, &label) in xs.iter().zip(labels) {
        let sign = match label {
            Label::Ignore => continue,
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        };
        n += 1;
        let z = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias;
        let m = sign * z;
        let p_t = sigmoid(m);
        let q = sigmoid(-m);
        let ln_pt = (-softplus(-m)).max(ln_eps);
        let qg = q.powf(gamma);
        loss += -qg * ln_pt;
        // d loss / d m, then chain through m = sign · z
        let dm = gamma * p_t * qg * ln_pt - qg * q;
        let dz = sign * dm;
        for (g, v) in grad_w.iter_mut().zip(x) {
            *g += dz * v;
        }
        grad_b += dz;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        loss *= inv;
        grad_w.iter_mut().for_each(|g| *g *= inv);
        grad_b *= inv;
    }
    Objective {
        loss,
        grad_w,
        grad_b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerTrainConfig {
    pub gamma: f64,
    pub ratio_k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            gamma: 2.0,
            ratio_k: 3,
            learning_rate: 0.5,
            epochs: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub schema_version: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub ratio_k: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl ScorerModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if self.feature_mean.len() != n || self.feature_std.len() != n {
            return Err(Error::invalid("scorer weight/normalisation lengths differ"));
        }
        if self.feature_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("scorer normalisation stds must be > 0"));
        }
        Ok(())
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Probability that the raw feature vector belongs to the positive class.
    pub fn score(&self, raw: &[f64]) -> f64 {
        let z = self
            .normalize(raw)
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            + self.bias;
        sigmoid(z)
    }
}

/// Per-feature population mean and standard deviation (zero stds become 1).
pub fn normalization_stats(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs.first().map_or(0, Vec::len);
    let n = xs.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| {
            let s = (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

#[derive(Debug, Clone)]
pub struct TrainedScorer {
    pub model: ScorerModel,
    /// Loss at the start of each epoch.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on mean focal loss, resampling negatives every epoch.
pub fn train_scorer(
    xs: &[Vec<f64>],
    is_positive: &[bool],
    schema_version: &str,
    cfg: &ScorerTrainConfig,
) -> Result<TrainedScorer> {
    if xs.len() != is_positive.len() || xs.is_empty() {
        return Err(Error::invalid("scorer dataset is empty or labels mismatch"));
    }
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("scorer features must be finite with equal length"));
    }
    if !is_positive.iter().any(|&p| p) {
        return Err(Error::invalid("scorer dataset has no positive samples"));
    }
    if !(cfg.gamma >= 0.0) || cfg.ratio_k < 1 || !(cfg.learning_rate > 0.0) || cfg.epochs == 0 {
        return Err(Error::invalid(format!("bad scorer hyperparameters {cfg:?}")));
    }

    let (mean, std) = normalization_stats(xs);
    let norm: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let labels = resample_labels(is_positive, cfg.ratio_k, seeds::derive(cfg.seed, "epoch", epoch as u64));
        let obj = focal_objective(&w, b, cfg.gamma, &norm, &labels);
        if !obj.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                loss: obj.loss,
            });
        }
        losses.push(obj.loss);
        for (wi, g) in w.iter_mut().zip(&obj.grad_w) {
            *wi -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * obj.grad_b;
    }

    Ok(TrainedScorer {
        model: ScorerModel {
            schema_version: schema_version.to_string(),
            weights: w,
            bias: b,
            gamma: cfg.gamma,
            ratio_k: cfg.ratio_k,
            feature_mean: mean,
            feature_std: std,
        },
        losses,
    })
}
