//! Analog-case retrieval: weighted cosine over standardized clinical features,
//! discounted for every feature whose raw values sit in different clinical
//! intervals, gated on demographic overlap and a similarity floor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::caselib::{CaseRecord, Repository};
use crate::cohort::{Feature, PatientRecord};
use crate::error::{Error, Result};

fn default_log_features() -> Vec<String> {
    [
        "creatinine_max",
        "lactate_max",
        "troponin_max",
        "bilirubin_max",
        "wbc_max",
        "urine_24h",
    ]
    .map(String::from)
    .to_vec()
}

/// Artifact defaults, not clinical guidance.
fn default_intervals() -> BTreeMap<String, Vec<f64>> {
    [
        ("lactate_max", vec![2.0, 4.0]),
        ("creatinine_max", vec![1.2, 2.0]),
        ("spo2_min", vec![88.0, 92.0]),
        ("sofa_24h", vec![2.0, 6.0, 10.0]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn default_weights() -> BTreeMap<String, f64> {
    Feature::CLINICAL.iter().map(|f| (f.name().to_string(), 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Per-feature weights; features left out weigh 1.
    pub weights: BTreeMap<String, f64>,
    pub log_features: Vec<String>,
    pub intervals: BTreeMap<String, Vec<f64>>,
    pub penalty_rho: f64,
    pub min_similarity: f64,
    pub min_demo_matches: u8,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            weights: default_weights(),
            log_features: default_log_features(),
            intervals: default_intervals(),
            penalty_rho: 0.9,
            min_similarity: 0.8,
            min_demo_matches: 2,
        }
    }
}

fn clinical(name: &str) -> Result<Feature> {
    Feature::from_name(name)
        .filter(|f| Feature::CLINICAL.contains(f))
        .ok_or_else(|| Error::config(format!("`{name}` is not a clinical feature")))
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in &self.weights {
            clinical(name)?;
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::config(format!("weight for `{name}` must be non-negative")));
            }
        }
        if !self.weight_vector().iter().any(|w| *w > 0.0) {
            return Err(Error::config("at least one retrieval weight must be positive"));
        }
        for name in &self.log_features {
            clinical(name)?;
        }
        for (name, bps) in &self.intervals {
            clinical(name)?;
            if bps.iter().any(|b| !b.is_finite()) || bps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(format!(
                    "breakpoints for `{name}` must be strictly ascending"
                )));
            }
        }
        if !(self.penalty_rho > 0.0 && self.penalty_rho <= 1.0) {
            return Err(Error::config("penalty_rho must lie in (0, 1]"));
        }
        if self.min_demo_matches > 3 {
            return Err(Error::config("min_demo_matches cannot exceed 3"));
        }
        Ok(())
    }

    /// Weights in [`Feature::CLINICAL`] order.
    pub fn weight_vector(&self) -> Vec<f64> {
        Feature::CLINICAL
            .iter()
            .map(|f| self.weights.get(f.name()).copied().unwrap_or(1.0))
            .collect()
    }

    fn interval_vector(&self) -> Vec<Option<&[f64]>> {
        Feature::CLINICAL
            .iter()
            .map(|f| self.intervals.get(f.name()).map(Vec::as_slice))
            .collect()
    }
}

/// Training-set centering and scaling on the (optionally log1p) scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub features: Vec<String>,
    pub log_features: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    pub fn fit(train: &[PatientRecord], config: &RetrievalConfig) -> Result<Standardization> {
        config.validate()?;
        if train.len() < 2 {
            return Err(Error::invalid("standardization needs at least two training records"));
        }
        let n = train.len() as f64;
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for f in Feature::CLINICAL {
            let log = config.log_features.iter().any(|l| l == f.name());
            let xs: Vec<f64> = train.iter().map(|p| transform(p.get(f), log)).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if !(sd > 0.0) {
                return Err(Error::Degenerate(format!(
                    "`{}` has zero spread in the training data",
                    f.name()
                )));
            }
            means.push(mean);
            sds.push(sd);
        }
        let mut log_features = config.log_features.clone();
        log_features.sort();
        Ok(Standardization {
            features: Feature::CLINICAL.iter().map(|f| f.name().to_string()).collect(),
            log_features,
            means,
            sds,
        })
    }

    pub fn check(&self) -> Result<()> {
        let names: Vec<&str> = Feature::CLINICAL.iter().map(|f| f.name()).collect();
        if self.features.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::Schema(
                "standardization does not cover the clinical features in order".into(),
            ));
        }
        if self.means.len() != names.len() || self.sds.len() != names.len() {
            return Err(Error::Schema("standardization vectors have the wrong length".into()));
        }
        if let Some(i) = self.sds.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Schema(format!(
                "standardization sd for `{}` must be positive",
                names[i]
            )));
        }
        Ok(())
    }

    fn is_log(&self, f: Feature) -> bool {
        self.log_features.iter().any(|l| l == f.name())
    }

    /// Standardized clinical vector; demographics are left out.
    pub fn normalize(&self, patient: &PatientRecord) -> Result<Vec<f64>> {
        let raw: Vec<f64> = Feature::CLINICAL.iter().map(|&f| patient.get(f)).collect();
        self.normalize_raw(&raw)
    }

    pub fn normalize_raw(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != Feature::CLINICAL.len() {
            return Err(Error::invalid("raw clinical vector has the wrong length"));
        }
        let v: Vec<f64> = Feature::CLINICAL
            .iter()
            .zip(raw)
            .zip(self.means.iter().zip(&self.sds))
            .map(|((&f, &x), (m, s))| (transform(x, self.is_log(f)) - m) / s)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("normalized vector is not finite"));
        }
        Ok(v)
    }

    fn same_scale(&self, config: &RetrievalConfig) -> bool {
        let mut want = config.log_features.clone();
        want.sort();
        want == self.log_features
    }
}

fn transform(x: f64, log: bool) -> f64 {
    if log {
        x.ln_1p()
    } else {
        x
    }
}

/// Index of the interval containing `x`; a value on a breakpoint belongs to
/// the interval above it.
fn interval_of(breakpoints: &[f64], x: f64) -> usize {
    breakpoints.partition_point(|b| *b <= x)
}

pub fn weighted_cosine(a: &[f64], b: &[f64], w: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != w.len() {
        return Err(Error::invalid(format!(
            "vector lengths differ ({}, {}, {} weights)",
            a.len(),
            b.len(),
            w.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for ((x, y), wi) in a.iter().zip(b).zip(w) {
        dot += wi * x * y;
        na += wi * x * x;
        nb += wi * y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub similarity: f64,
    pub base: f64,
    pub crossed: Vec<String>,
}

/// Penalized similarity between two standardized vectors in
/// [`Feature::CLINICAL`] order, with their raw values for the interval check.
pub fn similarity(
    query_vec: &[f64],
    case_vec: &[f64],
    query_raw: &[f64],
    case_raw: &[f64],
    config: &RetrievalConfig,
) -> Result<Similarity> {
    let w = config.weight_vector();
    if query_raw.len() != w.len() || case_raw.len() != w.len() {
        return Err(Error::invalid("raw vectors must cover every clinical feature"));
    }
    let base = weighted_cosine(query_vec, case_vec, &w)?;
    let zero = |v: &[f64]| v.iter().zip(&w).all(|(x, wi)| wi * x * x == 0.0);
    if zero(query_vec) || zero(case_vec) {
        return Ok(Similarity {
            similarity: 0.0,
            base: 0.0,
            crossed: Vec::new(),
        });
    }
    let crossed: Vec<String> = Feature::CLINICAL
        .iter()
        .zip(config.interval_vector())
        .enumerate()
        .filter_map(|(i, (f, bps))| {
            let bps = bps?;
            (interval_of(bps, query_raw[i]) != interval_of(bps, case_raw[i])).then(|| f.name().to_string())
        })
        .collect();
    // a negative cosine is pushed further down so the penalty never raises it
    let factor = config.penalty_rho.powi(crossed.len() as i32);
    let sim = if base >= 0.0 { base * factor } else { base / factor }.clamp(-1.0, 1.0);
    Ok(Similarity {
        similarity: sim,
        base,
        crossed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub case: CaseRecord,
    pub similarity: f64,
    pub base_similarity: f64,
    pub demo_matches: u8,
    pub crossed_features: Vec<String>,
}

/// Scores every case against a query; used by [`retrieve`] and for diagnostics.
pub fn score_cases(
    query: &PatientRecord,
    cases: &[CaseRecord],
    std: &Standardization,
    config: &RetrievalConfig,
) -> Result<Vec<RetrievalResult>> {
    let q = std.normalize(query)?;
    let q_raw: Vec<f64> = Feature::CLINICAL.iter().map(|&f| query.get(f)).collect();
    let key = query.subgroup();
    cases
        .iter()
        .map(|c| {
            let s = similarity(&q, &c.normalized_vector, &q_raw, &c.raw_vector()?, config)?;
            Ok(RetrievalResult {
                case: c.clone(),
                similarity: s.similarity,
                base_similarity: s.base,
                demo_matches: key.matches_with(&c.demographics),
                crossed_features: s.crossed,
            })
        })
        .collect()
}

/// Best qualifying analog, or `None` when no case passes both gates.
pub fn retrieve(
    query: &PatientRecord,
    repository: &Repository,
    config: &RetrievalConfig,
) -> Result<Option<RetrievalResult>> {
    let std = &repository.header.standardization;
    if !std.same_scale(config) {
        return Err(Error::Schema(
            "case repository was standardized with different log features than the retrieval config".into(),
        ));
    }
    retrieve_from(query, &repository.cases, std, config)
}

pub fn retrieve_from(
    query: &PatientRecord,
    cases: &[CaseRecord],
    std: &Standardization,
    config: &RetrievalConfig,
) -> Result<Option<RetrievalResult>> {
    let scored = score_cases(query, cases, std, config)?;
    Ok(scored
        .into_iter()
        .filter(|r| r.demo_matches >= config.min_demo_matches && r.similarity >= config.min_similarity)
        .min_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(b.demo_matches.cmp(&a.demo_matches))
                .then_with(|| a.case.id.cmp(&b.case.id))
        }))
}
