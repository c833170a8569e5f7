//! Discrimination and calibration metrics for binary mortality predictions.
//!
//! AUROC is the Mann-Whitney statistic with ties counted as half. AUPRC is the
//! non-interpolated step sum over a descending-score sweep with tied scores
//! grouped. Threshold metrics predict positive iff `score >= threshold`, and
//! ratios with a zero denominator are reported as `None`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub score: f64,
    /// `true` = died.
    pub label: bool,
}

impl ScoredLabel {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredLabel { score, label }
    }
}

/// Builds scored labels from parallel slices.
pub fn scored(scores: &[f64], labels: &[bool]) -> Vec<ScoredLabel> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| ScoredLabel::new(s, l))
        .collect()
}

fn check_scores(data: &[ScoredLabel]) -> Result<()> {
    if let Some(bad) = data
        .iter()
        .find(|d| !d.score.is_finite() || !(0.0..=1.0).contains(&d.score))
    {
        return Err(Error::invalid(format!("score {} is not a probability", bad.score)));
    }
    Ok(())
}

fn class_counts(data: &[ScoredLabel]) -> (usize, usize) {
    let pos = data.iter().filter(|d| d.label).count();
    (pos, data.len() - pos)
}

/// Indices sorted by descending score, stable on ties.
fn descending(data: &[ScoredLabel]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| data[b].score.total_cmp(&data[a].score));
    idx
}

pub fn auroc(data: &[ScoredLabel]) -> Result<f64> {
    check_scores(data)?;
    let (pos, neg) = class_counts(data);
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "AUROC undefined with {pos} positive(s) and {neg} negative(s)"
        )));
    }
    // Sweep ascending score; each tie group contributes
    // pos_in_group * (neg strictly below + 0.5 * neg_in_group).
    let mut idx = descending(data);
    idx.reverse();
    let mut neg_below = 0.0f64;
    let mut concordant = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let s = data[idx[i]].score;
        let (mut gp, mut gn) = (0.0, 0.0);
        while i < idx.len() && data[idx[i]].score == s {
            if data[idx[i]].label {
                gp += 1.0;
            } else {
                gn += 1.0;
            }
            i += 1;
        }
        concordant += gp * (neg_below + 0.5 * gn);
        neg_below += gn;
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

pub fn auprc(data: &[ScoredLabel]) -> Result<f64> {
    check_scores(data)?;
    let (pos, _) = class_counts(data);
    if pos == 0 {
        return Err(Error::Degenerate("AUPRC undefined without positives".into()));
    }
    let idx = descending(data);
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = data[idx[i]].score;
        let mut gp = 0.0;
        while i < idx.len() && data[idx[i]].score == s {
            if data[idx[i]].label {
                tp += 1.0;
                gp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        if gp > 0.0 {
            area += (tp / (tp + fp)) * (gp / pos as f64);
        }
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn from_scores(data: &[ScoredLabel], threshold: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for d in data {
            match (d.label, d.score >= threshold) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.fp + self.tn)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn npv(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fn_)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub confusion: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
}

pub fn threshold_metrics(data: &[ScoredLabel], threshold: f64) -> Result<ThresholdMetrics> {
    if data.is_empty() {
        return Err(Error::invalid("threshold metrics need at least one prediction"));
    }
    check_scores(data)?;
    let c = ConfusionCounts::from_scores(data, threshold);
    Ok(ThresholdMetrics {
        confusion: c,
        accuracy: c.accuracy(),
        f1: c.f1(),
        precision: c.precision(),
        sensitivity: c.tpr(),
        specificity: c.tnr(),
        npv: c.npv(),
    })
}

pub fn brier(data: &[ScoredLabel]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("Brier score needs at least one prediction"));
    }
    check_scores(data)?;
    let sum: f64 = data
        .iter()
        .map(|d| (d.score - if d.label { 1.0 } else { 0.0 }).powi(2))
        .sum();
    Ok(sum / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Auroc,
    Auprc,
    Accuracy,
    F1,
    Precision,
    Sensitivity,
    Specificity,
    Npv,
    Brier,
}

impl MetricName {
    pub const ALL: [MetricName; 9] = [
        MetricName::Auroc,
        MetricName::Auprc,
        MetricName::Accuracy,
        MetricName::F1,
        MetricName::Precision,
        MetricName::Sensitivity,
        MetricName::Specificity,
        MetricName::Npv,
        MetricName::Brier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Auroc => "auroc",
            MetricName::Auprc => "auprc",
            MetricName::Accuracy => "accuracy",
            MetricName::F1 => "f1",
            MetricName::Precision => "precision",
            MetricName::Sensitivity => "sensitivity",
            MetricName::Specificity => "specificity",
            MetricName::Npv => "npv",
            MetricName::Brier => "brier",
        }
    }

    /// Evaluates the metric; `Ok(None)` when it is undefined on this sample.
    pub fn evaluate(self, data: &[ScoredLabel], threshold: f64) -> Result<Option<f64>> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        };
        match self {
            MetricName::Auroc => defined(auroc(data)),
            MetricName::Auprc => defined(auprc(data)),
            MetricName::Brier => brier(data).map(Some),
            other => {
                let m = threshold_metrics(data, threshold)?;
                Ok(match other {
                    MetricName::Accuracy => m.accuracy,
                    MetricName::F1 => m.f1,
                    MetricName::Precision => m.precision,
                    MetricName::Sensitivity => m.sensitivity,
                    MetricName::Specificity => m.specificity,
                    MetricName::Npv => m.npv,
                    _ => unreachable!(),
                })
            }
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricName::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWithCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            seed: 2024,
            level: 0.95,
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap interval. Resamples where the metric is undefined are
/// redrawn, up to `10 * resamples` draws in total. The interval is widened to
/// contain the point estimate when the bootstrap distribution is lopsided.
pub fn bootstrap_ci(
    data: &[ScoredLabel],
    metric: MetricName,
    threshold: f64,
    config: &BootstrapConfig,
) -> Result<MetricWithCi> {
    bootstrap_with(data, config, &metric.to_string(), |s| metric.evaluate(s, threshold))
}

fn bootstrap_with<F>(data: &[ScoredLabel], config: &BootstrapConfig, name: &str, stat: F) -> Result<MetricWithCi>
where
    F: Fn(&[ScoredLabel]) -> Result<Option<f64>>,
{
    if config.resamples < 100 {
        return Err(Error::invalid("bootstrap needs at least 100 resamples"));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::invalid("confidence level must lie in (0, 1)"));
    }
    let point = stat(data)?.ok_or_else(|| Error::Degenerate(format!("{name} is undefined on the full sample")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.len();
    let cap = 10 * config.resamples;
    let mut stats = Vec::with_capacity(config.resamples);
    let mut draws = 0;
    let mut sample = Vec::with_capacity(n);
    while stats.len() < config.resamples {
        if draws == cap {
            return Err(Error::Degenerate(format!(
                "{name} undefined on too many bootstrap draws ({draws} attempts for {} resamples)",
                config.resamples
            )));
        }
        draws += 1;
        sample.clear();
        sample.extend((0..n).map(|_| data[rng.random_range(0..n)]));
        if let Some(v) = stat(&sample)? {
            stats.push(v);
        }
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - config.level) / 2.0;
    let lo = quantile(&stats, alpha).min(point);
    let hi = quantile(&stats, 1.0 - alpha).max(point);
    Ok(MetricWithCi {
        point,
        lo,
        hi,
        resamples: config.resamples,
        seed: config.seed,
    })
}
