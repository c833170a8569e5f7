//! Train/test balance diagnostics: Welch's t-test for continuous features,
//! Pearson's chi-square for categorical ones.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use super::{CohortSplit, Feature, PatientRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKind {
    WelchT,
    ChiSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceResult {
    pub feature: String,
    pub statistic: f64,
    pub p_value: f64,
    pub df: f64,
    pub kind: BalanceKind,
}

const CATEGORICAL: [&str; 6] = [
    "sex",
    "race",
    "age_band",
    "mech_vent",
    "code_status",
    "died_in_hospital",
];

fn category(p: &PatientRecord, feature: &str) -> &'static str {
    match feature {
        "sex" => p.sex.as_str(),
        "race" => p.race.as_str(),
        "age_band" => p.age_band().as_str(),
        "mech_vent" => bool_cat(p.mech_vent),
        "code_status" => bool_cat(p.code_status),
        "died_in_hospital" => bool_cat(p.died_in_hospital),
        _ => unreachable!("checked by caller"),
    }
}

fn bool_cat(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Compares the distribution of `feature` between train and test.
pub fn balance_test(split: &CohortSplit, feature: &str) -> Result<BalanceResult> {
    if let Some(f) = Feature::from_name(feature) {
        let a: Vec<f64> = split.train.iter().map(|p| p.get(f)).collect();
        let b: Vec<f64> = split.test.iter().map(|p| p.get(f)).collect();
        let (t, df, p) = welch_t_test(&a, &b).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("{feature}: {m}")),
            other => other,
        })?;
        return Ok(BalanceResult {
            feature: feature.to_string(),
            statistic: t,
            p_value: p,
            df,
            kind: BalanceKind::WelchT,
        });
    }
    if !CATEGORICAL.contains(&feature) {
        return Err(Error::invalid(format!("unknown feature `{feature}`")));
    }
    let mut levels: Vec<&'static str> = split
        .train
        .iter()
        .chain(&split.test)
        .map(|p| category(p, feature))
        .collect();
    levels.sort_unstable();
    levels.dedup();
    let count = |side: &[PatientRecord]| -> Vec<u64> {
        levels
            .iter()
            .map(|l| side.iter().filter(|p| category(p, feature) == *l).count() as u64)
            .collect()
    };
    let table = vec![count(&split.train), count(&split.test)];
    let (stat, df, p) = chi_square_test(&table)?;
    Ok(BalanceResult {
        feature: feature.to_string(),
        statistic: stat,
        p_value: p,
        df,
        kind: BalanceKind::ChiSquare,
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's two-sample t-test. Returns `(t, df, two-sided p)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "Welch t-test needs at least two observations per sample",
        ));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Degenerate("zero variance in both samples".into()));
    }
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok((t, df, p))
}

/// Pearson chi-square test of independence on an `r x c` contingency table.
/// Empty rows and columns are dropped; a table with fewer than two non-empty
/// rows or columns has statistic 0 and p = 1. Returns `(statistic, df, p)`.
pub fn chi_square_test(table: &[Vec<u64>]) -> Result<(f64, f64, f64)> {
    let cols = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("ragged contingency table"));
    }
    let rows: Vec<&Vec<u64>> = table.iter().filter(|r| r.iter().sum::<u64>() > 0).collect();
    let keep: Vec<usize> = (0..cols)
        .filter(|&j| rows.iter().map(|r| r[j]).sum::<u64>() > 0)
        .collect();
    if rows.len() < 2 || keep.len() < 2 {
        return Ok((0.0, 0.0, 1.0));
    }
    let total: f64 = rows.iter().flat_map(|r| keep.iter().map(|&j| r[j] as f64)).sum();
    let row_sums: Vec<f64> = rows.iter().map(|r| keep.iter().map(|&j| r[j] as f64).sum()).collect();
    let col_sums: Vec<f64> = keep.iter().map(|&j| rows.iter().map(|r| r[j] as f64).sum()).collect();
    let mut stat = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (k, &j) in keep.iter().enumerate() {
            let expected = row_sums[i] * col_sums[k] / total;
            stat += (r[j] as f64 - expected).powi(2) / expected;
        }
    }
    let df = ((rows.len() - 1) * (keep.len() - 1)) as f64;
    let dist = ChiSquared::new(df).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok((stat, df, dist.sf(stat).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{split, synth_cohort};

    #[test]
    fn identical_samples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (t, _, p) = welch_t_test(&x, &x).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn shifted_samples_match_reference_distribution() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [11.0, 12.0, 13.0, 14.0, 15.0];
        let (t, df, p) = welch_t_test(&a, &b).unwrap();
        assert!((t + 10.0).abs() < 1e-12);
        assert!((df - 8.0).abs() < 1e-12);
        // scipy.stats.ttest_ind(a, b, equal_var=False).pvalue
        assert!((p - 8.488_181_527_628_5e-6).abs() < 1e-12, "p = {p}");
        assert!(p < 0.01);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let x = [2.0; 5];
        assert!(matches!(welch_t_test(&x, &x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn balanced_table_has_zero_statistic() {
        let (stat, df, p) = chi_square_test(&[vec![30, 30], vec![30, 30]]).unwrap();
        assert_eq!(stat, 0.0);
        assert_eq!(df, 1.0);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_reference_value() {
        // scipy.stats.chi2_contingency([[10, 20], [30, 40]], correction=False)
        let (stat, df, p) = chi_square_test(&[vec![10, 20], vec![30, 40]]).unwrap();
        assert!((stat - 0.793_650_793_650_793_6).abs() < 1e-12);
        assert_eq!(df, 1.0);
        assert!((p - 0.372_998_483_613_486_86).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn split_balance_on_synthetic_cohort() {
        let cohort = synth_cohort(2000, 4, None).unwrap();
        let s = split(&cohort, 0.7, 1).unwrap();
        let age = balance_test(&s, "age").unwrap();
        assert_eq!(age.kind, BalanceKind::WelchT);
        assert!((0.0..=1.0).contains(&age.p_value));
        let race = balance_test(&s, "race").unwrap();
        assert_eq!(race.kind, BalanceKind::ChiSquare);
        assert_eq!(race.df, 3.0);
        let died = balance_test(&s, "died_in_hospital").unwrap();
        assert!(died.p_value > 0.9, "stratified split should be balanced: {died:?}");
        // constant column: nothing to compare
        let vent = balance_test(&s, "mech_vent").unwrap();
        assert_eq!((vent.statistic, vent.p_value), (0.0, 1.0));
        assert!(balance_test(&s, "shoe_size").is_err());
    }
}
