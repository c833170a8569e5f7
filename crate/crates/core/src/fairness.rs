//! Subgroup discrimination, equal-opportunity gaps and bias flags.
//!
//! EOD is `|TPR_a - TPR_b|`, which equals the FNR gap. FPR values are carried
//! per group rather than as a single number.

use serde::{Deserialize, Serialize};

use crate::cohort::{AgeBand, Attribute, DemographicValue, PatientRecord, Race, Sex, SubgroupKey, SubgroupPattern};
use crate::error::{Error, Result};
use crate::metrics::{auroc, ConfusionCounts, ScoredLabel};

/// Gaps strictly above this are flagged.
pub const FLAG_THRESHOLD: f64 = 0.05;

/// One scored prediction with the demographics needed to slice it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: String,
    pub subgroup: SubgroupKey,
    pub label: bool,
    pub score: f64,
}

impl ScoredRecord {
    pub fn new(patient: &PatientRecord, score: f64) -> Self {
        ScoredRecord {
            id: patient.id.clone(),
            subgroup: patient.subgroup(),
            label: patient.died_in_hospital,
            score,
        }
    }

    pub fn scored_label(&self) -> ScoredLabel {
        ScoredLabel::new(self.score, self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetrics {
    pub key: SubgroupPattern,
    pub label: String,
    pub n: usize,
    pub positives: usize,
    pub confusion: ConfusionCounts,
    pub auroc: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub tnr: Option<f64>,
}

fn metrics_for(data: &[ScoredRecord], threshold: f64, key: SubgroupPattern, label: String) -> Result<SubgroupMetrics> {
    let scored: Vec<ScoredLabel> = data
        .iter()
        .filter(|r| key.matches(&r.subgroup))
        .map(ScoredRecord::scored_label)
        .collect();
    let c = ConfusionCounts::from_scores(&scored, threshold);
    let auroc = match auroc(&scored) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SubgroupMetrics {
        key,
        label,
        n: scored.len(),
        positives: (c.tp + c.fn_) as usize,
        confusion: c,
        auroc,
        tpr: c.tpr(),
        fpr: c.fpr(),
        fnr: c.fnr(),
        tnr: c.tnr(),
    })
}

/// Metrics for the records matching `key`, which may be marginal.
pub fn subgroup_metrics(data: &[ScoredRecord], threshold: f64, key: SubgroupPattern) -> Result<SubgroupMetrics> {
    let m = metrics_for(data, threshold, key, key.to_string())?;
    if m.n == 0 {
        return Err(Error::Degenerate(format!("subgroup `{key}` is empty")));
    }
    Ok(m)
}

/// Every marginal value and every full lattice cell, including empty ones.
/// Cells with too few records carry absent rates instead of failing.
pub fn subgroup_table(data: &[ScoredRecord], threshold: f64) -> Result<Vec<SubgroupMetrics>> {
    let mut keys = vec![SubgroupPattern::ALL];
    keys.extend(Sex::ALL.map(|v| SubgroupPattern::of(DemographicValue::Sex(v))));
    keys.extend(AgeBand::ALL.map(|v| SubgroupPattern::of(DemographicValue::AgeBand(v))));
    keys.extend(Race::ALL.map(|v| SubgroupPattern::of(DemographicValue::Race(v))));
    keys.extend(SubgroupKey::lattice().into_iter().map(SubgroupPattern::full));
    keys.into_iter()
        .map(|k| metrics_for(data, threshold, k, k.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessComparison {
    pub dimension: Attribute,
    pub group_a: String,
    pub group_b: String,
    pub tpr_a: f64,
    pub tpr_b: f64,
    pub eod: f64,
    /// `(FPR_a, FPR_b)`; a side is absent when that group has no negatives.
    pub fpr_gap: (Option<f64>, Option<f64>),
    pub auroc_gap: Option<f64>,
    pub flag_eod: bool,
    pub flag_auroc: bool,
}

pub fn compare(dimension: Attribute, a: &SubgroupMetrics, b: &SubgroupMetrics) -> Result<FairnessComparison> {
    let undefined = |m: &SubgroupMetrics| Error::Degenerate(format!("TPR undefined for `{}` (no positives)", m.label));
    let tpr_a = a.tpr.ok_or_else(|| undefined(a))?;
    let tpr_b = b.tpr.ok_or_else(|| undefined(b))?;
    let eod = (tpr_a - tpr_b).abs();
    let auroc_gap = match (a.auroc, b.auroc) {
        (Some(x), Some(y)) => Some((x - y).abs()),
        _ => None,
    };
    Ok(FairnessComparison {
        dimension,
        group_a: a.label.clone(),
        group_b: b.label.clone(),
        tpr_a,
        tpr_b,
        eod,
        fpr_gap: (a.fpr, b.fpr),
        auroc_gap,
        flag_eod: eod > FLAG_THRESHOLD,
        flag_auroc: auroc_gap.is_some_and(|g| g > FLAG_THRESHOLD),
    })
}

/// The five standard comparisons, in report order.
pub const COMPARISONS: [(DemographicValue, DemographicValue); 5] = [
    (DemographicValue::Sex(Sex::Male), DemographicValue::Sex(Sex::Female)),
    (
        DemographicValue::AgeBand(AgeBand::Adult),
        DemographicValue::AgeBand(AgeBand::Senior),
    ),
    (DemographicValue::Race(Race::White), DemographicValue::Race(Race::Black)),
    (DemographicValue::Race(Race::White), DemographicValue::Race(Race::Other)),
    (DemographicValue::Race(Race::White), DemographicValue::Race(Race::Asian)),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionGap {
    pub dimension: Attribute,
    /// Largest pairwise AUROC gap among values with defined AUROC.
    pub max_auroc_gap: Option<f64>,
    pub groups: Option<(String, String)>,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub threshold: f64,
    pub comparisons: Vec<FairnessComparison>,
    pub max_auroc_gaps: Vec<DimensionGap>,
}

impl FairnessReport {
    pub fn comparison(&self, a: &str, b: &str) -> Option<&FairnessComparison> {
        self.comparisons.iter().find(|c| c.group_a == a && c.group_b == b)
    }
}

fn dimension_values(dim: Attribute) -> Vec<DemographicValue> {
    match dim {
        Attribute::Sex => Sex::ALL.map(DemographicValue::Sex).to_vec(),
        Attribute::AgeBand => AgeBand::ALL.map(DemographicValue::AgeBand).to_vec(),
        Attribute::Race => Race::ALL.map(DemographicValue::Race).to_vec(),
    }
}

fn max_gaps(data: &[ScoredRecord], threshold: f64) -> Result<Vec<DimensionGap>> {
    Attribute::ALL
        .iter()
        .map(|&dim| {
            let groups = dimension_values(dim)
                .into_iter()
                .map(|v| metrics_for(data, threshold, SubgroupPattern::of(v), v.to_string()))
                .collect::<Result<Vec<_>>>()?;
            let mut best: Option<(f64, String, String)> = None;
            for (i, a) in groups.iter().enumerate() {
                for b in &groups[i + 1..] {
                    if let (Some(x), Some(y)) = (a.auroc, b.auroc) {
                        let gap = (x - y).abs();
                        if best.as_ref().is_none_or(|(g, _, _)| gap > *g) {
                            best = Some((gap, a.label.clone(), b.label.clone()));
                        }
                    }
                }
            }
            Ok(DimensionGap {
                dimension: dim,
                max_auroc_gap: best.as_ref().map(|b| b.0),
                flag: best.as_ref().is_some_and(|b| b.0 > FLAG_THRESHOLD),
                groups: best.map(|(_, a, b)| (a, b)),
            })
        })
        .collect()
}

pub fn fairness_report(data: &[ScoredRecord], threshold: f64) -> Result<FairnessReport> {
    let comparisons = COMPARISONS
        .iter()
        .map(|&(a, b)| {
            let annotate = |e: Error| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("{a} vs {b}: {m}")),
                other => other,
            };
            let ma = subgroup_metrics(data, threshold, SubgroupPattern::of(a)).map_err(annotate)?;
            let mb = subgroup_metrics(data, threshold, SubgroupPattern::of(b)).map_err(annotate)?;
            compare(a.attribute(), &ma, &mb).map_err(annotate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FairnessReport {
        threshold,
        comparisons,
        max_auroc_gaps: max_gaps(data, threshold)?,
    })
}

/// Outcome of one comparison in a lenient report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ComparisonOutcome {
    Computed(FairnessComparison),
    InsufficientData {
        group_a: String,
        group_b: String,
        reason: String,
    },
}

/// Like [`fairness_report`] but never fails on thin subgroups; such
/// comparisons are reported as insufficient data.
pub fn fairness_report_lenient(
    data: &[ScoredRecord],
    threshold: f64,
) -> Result<(Vec<ComparisonOutcome>, Vec<DimensionGap>)> {
    let outcomes = COMPARISONS
        .iter()
        .map(|&(a, b)| {
            let result = subgroup_metrics(data, threshold, SubgroupPattern::of(a)).and_then(|ma| {
                let mb = subgroup_metrics(data, threshold, SubgroupPattern::of(b))?;
                compare(a.attribute(), &ma, &mb)
            });
            match result {
                Ok(c) => Ok(ComparisonOutcome::Computed(c)),
                Err(Error::Degenerate(reason)) => Ok(ComparisonOutcome::InsufficientData {
                    group_a: a.to_string(),
                    group_b: b.to_string(),
                    reason,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((outcomes, max_gaps(data, threshold)?))
}
