use serde::{Deserialize, Serialize};

use super::PatientRecord;
use crate::error::{Error, Result};
use crate::util::stable_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
    pub seed: u64,
    pub ratio: f64,
}

/// Outcome-stratified train/test split.
///
/// The train size is `round(ratio * n)`; per-class quotas are allocated by
/// largest remainder. Which records land in train depends only on `(seed, id)`,
/// so membership does not change when the input is reordered. Both sides keep
/// the input order.
pub fn split(cohort: &[PatientRecord], ratio: f64, seed: u64) -> Result<CohortSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "split ratio {ratio} must lie strictly between 0 and 1"
        )));
    }
    let died: Vec<usize> = (0..cohort.len()).filter(|&i| cohort[i].died_in_hospital).collect();
    let survived: Vec<usize> = (0..cohort.len()).filter(|&i| !cohort[i].died_in_hospital).collect();
    if died.len() < 2 || survived.len() < 2 {
        return Err(Error::Degenerate(format!(
            "stratified split needs at least 2 records per outcome class (died {}, survived {})",
            died.len(),
            survived.len()
        )));
    }

    let n = cohort.len();
    let target = (ratio * n as f64).round() as usize;
    let exact = [ratio * died.len() as f64, ratio * survived.len() as f64];
    let mut quota = [exact[0].floor() as usize, exact[1].floor() as usize];
    let mut remaining = target.saturating_sub(quota[0] + quota[1]);
    // Largest remainder; the died class wins exact ties.
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
    });
    for &class in order.iter().cycle().take(4) {
        if remaining == 0 {
            break;
        }
        let size = if class == 0 { died.len() } else { survived.len() };
        if quota[class] < size {
            quota[class] += 1;
            remaining -= 1;
        }
    }

    let mut in_train = vec![false; n];
    for (class, members) in [&died, &survived].into_iter().enumerate() {
        let mut ranked: Vec<(u64, &str, usize)> = members
            .iter()
            .map(|&i| (stable_hash(seed, &cohort[i].id), cohort[i].id.as_str(), i))
            .collect();
        ranked.sort_unstable();
        for &(_, _, i) in ranked.iter().take(quota[class]) {
            in_train[i] = true;
        }
    }

    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(n - target);
    for (p, t) in cohort.iter().zip(in_train) {
        if t {
            train.push(p.clone());
        } else {
            test.push(p.clone());
        }
    }
    Ok(CohortSplit {
        train,
        test,
        seed,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::synth_cohort;
    use std::collections::HashSet;

    fn toy(died: usize, survived: usize) -> Vec<PatientRecord> {
        let base = synth_cohort(died + survived, 99, None).unwrap();
        base.into_iter()
            .enumerate()
            .map(|(i, mut p)| {
                p.died_in_hospital = i < died;
                p
            })
            .collect()
    }

    #[test]
    fn ten_records_seventy_percent() {
        let cohort = toy(5, 5);
        let s = split(&cohort, 0.7, 1).unwrap();
        assert_eq!(s.train.len(), 7);
        assert_eq!(s.test.len(), 3);
        let died = s.train.iter().filter(|p| p.died_in_hospital).count();
        assert!(died == 3 || died == 4, "died in train {died}");
    }

    #[test]
    fn deterministic() {
        let cohort = synth_cohort(300, 5, None).unwrap();
        assert_eq!(split(&cohort, 0.7, 1).unwrap(), split(&cohort, 0.7, 1).unwrap());
    }

    #[test]
    fn single_class_is_an_error() {
        let cohort = toy(0, 10);
        assert!(matches!(split(&cohort, 0.7, 1), Err(Error::Degenerate(_))));
        assert!(split(&toy(1, 10), 0.7, 1).is_err());
    }

    #[test]
    fn ratio_bounds() {
        let cohort = toy(5, 5);
        assert!(split(&cohort, 0.0, 1).is_err());
        assert!(split(&cohort, 1.0, 1).is_err());
    }

    #[test]
    fn stratified_prevalence_and_size() {
        let cohort = synth_cohort(5000, 11, None).unwrap();
        let s = split(&cohort, 0.7, 3).unwrap();
        let expected = 0.7 * cohort.len() as f64;
        assert!((s.train.len() as f64 - expected).abs() <= 1.0);
        let prev = |v: &[PatientRecord]| v.iter().filter(|p| p.died_in_hospital).count() as f64 / v.len() as f64;
        assert!((prev(&s.train) - prev(&s.test)).abs() < 0.01);
    }

    #[test]
    fn membership_ignores_input_order() {
        let cohort = synth_cohort(400, 2, None).unwrap();
        let mut reversed = cohort.clone();
        reversed.reverse();
        let a: HashSet<String> = split(&cohort, 0.7, 9)
            .unwrap()
            .train
            .into_iter()
            .map(|p| p.id)
            .collect();
        let b: HashSet<String> = split(&reversed, 0.7, 9)
            .unwrap()
            .train
            .into_iter()
            .map(|p| p.id)
            .collect();
        assert_eq!(a, b);
    }
}
