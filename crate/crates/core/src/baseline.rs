//! Logistic-regression comparator trained by full-batch gradient descent on
//! standardized clinical features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Feature, PatientRecord};
use crate::error::{Error, Result};
use crate::util::sigmoid;

/// Report label for rows produced by this model.
pub const BASELINE_LABEL: &str = "logistic baseline";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.5,
            epochs: 500,
            l2: 1e-3,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_order: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Training loss after each epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

/// Mean L2-regularized logistic loss and its gradient with respect to
/// `(weights, bias)`. Rows of `z` are already standardized.
pub fn loss_and_gradient(z: &[Vec<f64>], y: &[bool], weights: &[f64], bias: f64, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = z.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (row, &label) in z.iter().zip(y) {
        let logit = bias + row.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>();
        let t = if label { 1.0 } else { 0.0 };
        // log(1 + e^x) - t*x, evaluated without overflow
        loss += logit.max(0.0) + (-logit.abs()).exp().ln_1p() - t * logit;
        let r = sigmoid(logit) - t;
        for (g, x) in gw.iter_mut().zip(row) {
            *g += r * x;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, gw, gb)
}

fn standardize(x: &[Vec<f64>], means: &[f64], sds: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            row.iter()
                .zip(means.iter().zip(sds))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect()
}

/// Fits on a raw feature matrix. Columns with zero spread get sd 1.
pub fn fit_matrix(x: &[Vec<f64>], y: &[bool], feature_order: &[String], config: &FitConfig) -> Result<LinearModel> {
    if config.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if !(config.learning_rate > 0.0) || !(config.l2 >= 0.0) {
        return Err(Error::invalid("learning rate must be positive and l2 non-negative"));
    }
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::invalid(
            "feature matrix and labels must be non-empty and aligned",
        ));
    }
    let d = feature_order.len();
    if let Some(i) = x.iter().position(|r| r.len() != d) {
        return Err(Error::invalid(format!(
            "row {i} has {} values, expected {d}",
            x[i].len()
        )));
    }
    let pos = y.iter().filter(|&&t| t).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Degenerate(
            "training data contains a single outcome class".into(),
        ));
    }

    let n = x.len() as f64;
    let means: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sds: Vec<f64> = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = standardize(x, &means, &sds);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights: Vec<f64> = (0..d).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut bias = 0.0;
    let (mut loss, mut gw, mut gb) = loss_and_gradient(&z, y, &weights, bias, config.l2);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        // Backtrack when a step would raise the loss, so the history is monotone.
        let mut lr = config.learning_rate;
        let mut accepted = None;
        for _ in 0..30 {
            let w: Vec<f64> = weights.iter().zip(&gw).map(|(w, g)| w - lr * g).collect();
            let b = bias - lr * gb;
            let next = loss_and_gradient(&z, y, &w, b, config.l2);
            if !next.0.is_finite() {
                return Err(Error::Degenerate(format!("non-finite training loss at epoch {epoch}")));
            }
            if next.0 <= loss + 1e-12 {
                accepted = Some((w, b, next));
                break;
            }
            lr *= 0.5;
        }
        if let Some((w, b, (l, g, g0))) = accepted {
            weights = w;
            bias = b;
            loss = l;
            gw = g;
            gb = g0;
        }
        history.push(loss);
    }
    Ok(LinearModel {
        feature_order: feature_order.to_vec(),
        means,
        sds,
        weights,
        bias,
        loss_history: history,
    })
}

/// Fits on every numeric feature (age plus the clinical measurements).
pub fn fit(train: &[PatientRecord], config: &FitConfig) -> Result<LinearModel> {
    let order: Vec<String> = Feature::NUMERIC.iter().map(|f| f.name().to_string()).collect();
    let x: Vec<Vec<f64>> = train
        .iter()
        .map(|p| Feature::NUMERIC.iter().map(|&f| p.get(f)).collect())
        .collect();
    let y: Vec<bool> = train.iter().map(|p| p.died_in_hospital).collect();
    fit_matrix(&x, &y, &order, config)
}

impl LinearModel {
    pub fn check(&self) -> Result<()> {
        let d = self.feature_order.len();
        if self.weights.len() != d || self.means.len() != d || self.sds.len() != d {
            return Err(Error::invalid("model vectors disagree with feature_order length"));
        }
        if let Some(i) = self.sds.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::invalid(format!(
                "sd for `{}` must be positive",
                self.feature_order[i]
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().chain(&self.means).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(())
    }

    pub fn logit_row(&self, raw: &[f64]) -> f64 {
        self.bias
            + raw
                .iter()
                .zip(&self.weights)
                .zip(self.means.iter().zip(&self.sds))
                .map(|((v, w), (m, s))| w * (v - m) / s)
                .sum::<f64>()
    }

    pub fn predict_row(&self, raw: &[f64]) -> Result<f64> {
        if raw.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                self.weights.len(),
                raw.len()
            )));
        }
        Ok(sigmoid(self.logit_row(raw)))
    }

    pub fn predict_prob(&self, patient: &PatientRecord) -> Result<f64> {
        let raw = self
            .feature_order
            .iter()
            .map(|name| {
                patient
                    .get_named(name)
                    .ok_or_else(|| Error::invalid(format!("patient {} lacks model feature `{name}`", patient.id)))
            })
            .collect::<Result<Vec<f64>>>()?;
        self.predict_row(&raw)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut bare = self.clone();
        bare.loss_history.clear();
        toml::to_string(&bare).map_err(|e| Error::Parse(format!("cannot serialize model: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<LinearModel> {
        let model: LinearModel = toml::from_str(text).map_err(|e| Error::Parse(format!("model file: {e}")))?;
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LinearModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LinearModel::from_toml(&text)
    }
}
