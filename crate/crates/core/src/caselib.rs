//! Case repository: mined mispredictions with counterfactual bias verdicts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::client::Predictor;
use crate::cohort::{AgeBand, Attribute, DemographicValue, Feature, PatientRecord, Race, SubgroupKey};
use crate::error::{Error, Result};
use crate::judge::{CounterfactualEntry, Judge, JudgeRequest, JudgeVerdict};
use crate::prompting::StrategyKind;
use crate::retrieval::Standardization;
use crate::util::{bounded_map, stable_hash};

pub const REPOSITORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    FalseNegative,
    FalsePositive,
}

impl ErrorType {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::FalseNegative => "false_negative",
            ErrorType::FalsePositive => "false_positive",
        }
    }

    /// `None` when the prediction is correct at `threshold`.
    pub fn classify(label: bool, score: f64, threshold: f64) -> Option<ErrorType> {
        match (label, score >= threshold) {
            (true, false) => Some(ErrorType::FalseNegative),
            (false, true) => Some(ErrorType::FalsePositive),
            _ => None,
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasType {
    RacialOverestimation,
    RacialUnderestimation,
    SexBasedAssumption,
    AgeOverweighting,
    None,
}

impl BiasType {
    pub const ALL: [BiasType; 5] = [
        BiasType::RacialOverestimation,
        BiasType::RacialUnderestimation,
        BiasType::SexBasedAssumption,
        BiasType::AgeOverweighting,
        BiasType::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasType::RacialOverestimation => "racial_overestimation",
            BiasType::RacialUnderestimation => "racial_underestimation",
            BiasType::SexBasedAssumption => "sex_based_assumption",
            BiasType::AgeOverweighting => "age_overweighting",
            BiasType::None => "none",
        }
    }

    /// Demographic attribute the bias concerns.
    pub fn attribute(self) -> Option<Attribute> {
        match self {
            BiasType::RacialOverestimation | BiasType::RacialUnderestimation => Some(Attribute::Race),
            BiasType::SexBasedAssumption => Some(Attribute::Sex),
            BiasType::AgeOverweighting => Some(Attribute::AgeBand),
            BiasType::None => None,
        }
    }

    pub fn human(self) -> &'static str {
        match self {
            BiasType::RacialOverestimation => "racial overestimation bias",
            BiasType::RacialUnderestimation => "racial underestimation bias",
            BiasType::SexBasedAssumption => "sex-based assumption",
            BiasType::AgeOverweighting => "age overweighting",
            BiasType::None => "no bias detected",
        }
    }
}

impl fmt::Display for BiasType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        BiasType::ALL
            .iter()
            .copied()
            .find(|b| b.as_str() == t)
            .ok_or_else(|| Error::Parse(format!("unknown bias type `{s}`")))
    }
}

/// A bias-annotated historical misprediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub age: u32,
    pub demographics: SubgroupKey,
    /// Raw clinical values keyed by column name.
    pub clinical: BTreeMap<String, f64>,
    pub true_outcome: bool,
    pub predicted_probability: f64,
    pub error_type: ErrorType,
    pub bias_type: BiasType,
    pub judge_rationale: String,
    pub normalized_vector: Vec<f64>,
}

impl CaseRecord {
    /// Raw clinical values in [`Feature::CLINICAL`] order.
    pub fn raw_vector(&self) -> Result<Vec<f64>> {
        Feature::CLINICAL
            .iter()
            .map(|f| {
                self.clinical
                    .get(f.name())
                    .copied()
                    .ok_or_else(|| Error::Parse(format!("case {} lacks `{}`", self.id, f.name())))
            })
            .collect()
    }

    pub fn check(&self, threshold: f64) -> Result<()> {
        if ErrorType::classify(self.true_outcome, self.predicted_probability, threshold) != Some(self.error_type) {
            return Err(Error::invalid(format!(
                "case {}: {} inconsistent with outcome {} and probability {}",
                self.id, self.error_type, self.true_outcome, self.predicted_probability
            )));
        }
        if self.normalized_vector.len() != Feature::CLINICAL.len()
            || self.normalized_vector.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid(format!("case {}: bad normalized vector", self.id)));
        }
        self.raw_vector().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedError {
    pub patient: PatientRecord,
    pub score: f64,
    pub error_type: ErrorType,
}

/// Records misclassified at `threshold`, in input order.
pub fn mine_errors(predictions: &[(PatientRecord, f64)], threshold: f64) -> Vec<MinedError> {
    predictions
        .iter()
        .filter_map(|(p, s)| {
            ErrorType::classify(p.died_in_hospital, *s, threshold).map(|e| MinedError {
                patient: p.clone(),
                score: *s,
                error_type: e,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPair {
    pub original: PatientRecord,
    pub variant: PatientRecord,
    pub flipped_attribute: Attribute,
    pub variant_value: DemographicValue,
}

/// Age across the 59/60 boundary at the same distance, clamped to [18, 95].
pub fn reflect_age(age: u32) -> u32 {
    (119i64 - i64::from(age)).clamp(18, 95) as u32
}

/// One sex flip, one age-band flip and three race substitutions.
pub fn make_counterfactuals(patient: &PatientRecord) -> Vec<CounterfactualPair> {
    let mut out = Vec::with_capacity(5);
    let mut v = patient.clone();
    v.sex = patient.sex.flipped();
    out.push(CounterfactualPair {
        original: patient.clone(),
        variant_value: DemographicValue::Sex(v.sex),
        variant: v,
        flipped_attribute: Attribute::Sex,
    });
    let mut v = patient.clone();
    v.age = reflect_age(patient.age);
    debug_assert_ne!(AgeBand::of_age(v.age), patient.age_band());
    out.push(CounterfactualPair {
        original: patient.clone(),
        variant_value: DemographicValue::AgeBand(v.age_band()),
        variant: v,
        flipped_attribute: Attribute::AgeBand,
    });
    for race in Race::ALL.into_iter().filter(|r| *r != patient.race) {
        let mut v = patient.clone();
        v.race = race;
        out.push(CounterfactualPair {
            original: patient.clone(),
            variant: v,
            flipped_attribute: Attribute::Race,
            variant_value: DemographicValue::Race(race),
        });
    }
    out
}

/// Short clinical description used in judge requests.
pub fn case_summary(p: &PatientRecord) -> String {
    let mut s = format!("{}-year-old {} {} patient", p.age, p.race, p.sex);
    for f in Feature::CLINICAL {
        s.push_str(&format!(
            "; {} {}",
            f.label(),
            crate::prompting::format_value(f, p.get(f))
        ));
    }
    s
}

/// Pairs each counterfactual with the model output on its variant and asks the judge.
pub fn judge_case(
    original: &PatientRecord,
    original_probability: f64,
    outputs: &[(CounterfactualPair, f64, String)],
    delta: f64,
    judge: &dyn Judge,
) -> Result<JudgeVerdict> {
    let request = JudgeRequest {
        case_summary: case_summary(original),
        original: original.subgroup(),
        original_probability,
        counterfactuals: outputs
            .iter()
            .map(|(pair, prob, reasoning)| CounterfactualEntry {
                attribute: pair.flipped_attribute,
                variant_value: pair.variant_value,
                probability: *prob,
                reasoning: reasoning.clone(),
            })
            .collect(),
        delta_hint: delta,
    };
    request.check()?;
    judge.judge(&request).map(JudgeVerdict::normalized)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseLibConfig {
    pub max_cases: usize,
    pub seed: u64,
    pub delta: f64,
    pub max_in_flight: usize,
}

impl Default for CaseLibConfig {
    fn default() -> Self {
        CaseLibConfig {
            max_cases: 64,
            seed: 2024,
            delta: 0.1,
            max_in_flight: 4,
        }
    }
}

/// Stratified round-robin selection over (error type, bias type, race)
/// cells. Biased cases fill first; cells are visited so that consecutive
/// picks rotate through races. Within a cell the order is a seeded hash of
/// the case id.
pub fn select_cases(cases: Vec<CaseRecord>, max_cases: usize, seed: u64) -> Vec<CaseRecord> {
    if cases.len() <= max_cases {
        return sort_cases(cases, seed);
    }
    let (biased, unbiased): (Vec<CaseRecord>, Vec<CaseRecord>) =
        cases.into_iter().partition(|c| c.bias_type != BiasType::None);
    let mut picked = round_robin(biased, max_cases, seed);
    let room = max_cases - picked.len();
    picked.extend(round_robin(unbiased, room, seed));
    picked
}

fn sort_cases(mut cases: Vec<CaseRecord>, seed: u64) -> Vec<CaseRecord> {
    cases.sort_by(|a, b| (stable_hash(seed, &a.id), &a.id).cmp(&(stable_hash(seed, &b.id), &b.id)));
    cases
}

fn round_robin(cases: Vec<CaseRecord>, limit: usize, seed: u64) -> Vec<CaseRecord> {
    type Cell = (Race, ErrorType, BiasType);
    let mut cells: BTreeMap<Cell, Vec<CaseRecord>> = BTreeMap::new();
    for c in sort_cases(cases, seed) {
        cells
            .entry((c.demographics.race, c.error_type, c.bias_type))
            .or_default()
            .push(c);
    }
    // Order cells by their rank within their race, then by race.
    let mut rank: BTreeMap<Race, usize> = BTreeMap::new();
    let mut order: Vec<(usize, Race, Cell)> = cells
        .keys()
        .map(|&cell| {
            let r = rank.entry(cell.0).or_insert(0);
            *r += 1;
            (*r, cell.0, cell)
        })
        .collect();
    order.sort();
    let mut queues: Vec<std::collections::VecDeque<CaseRecord>> = order
        .iter()
        .map(|(_, _, cell)| cells.remove(cell).unwrap_or_default().into())
        .collect();
    let mut out = Vec::with_capacity(limit);
    while out.len() < limit && queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if out.len() == limit {
                break;
            }
            if let Some(c) = q.pop_front() {
                out.push(c);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryHeader {
    pub schema_version: u32,
    pub kind: String,
    pub threshold: f64,
    pub cases: usize,
    pub mined_errors: usize,
    pub standardization: Standardization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repository {
    pub header: RepositoryHeader,
    pub cases: Vec<CaseRecord>,
}

impl Repository {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header).map_err(|e| Error::Parse(e.to_string()))?;
        out.push('\n');
        for c in &self.cases {
            out.push_str(&serde_json::to_string(c).map_err(|e| Error::Parse(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Repository> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Schema("case repository is empty".into()))?;
        let header: RepositoryHeader =
            serde_json::from_str(head).map_err(|e| Error::Schema(format!("case repository header: {e}")))?;
        if header.schema_version != REPOSITORY_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "case repository schema version {} (expected {REPOSITORY_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        header.standardization.check()?;
        let cases = lines
            .enumerate()
            .map(|(i, l)| {
                let c: CaseRecord =
                    serde_json::from_str(l).map_err(|e| Error::Parse(format!("case line {}: {e}", i + 2)))?;
                c.check(header.threshold)?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Repository { header, cases })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Repository> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Repository::from_jsonl(&text)
    }

    pub fn bias_counts(&self) -> BTreeMap<BiasType, usize> {
        let mut m = BTreeMap::new();
        for c in &self.cases {
            *m.entry(c.bias_type).or_insert(0) += 1;
        }
        m
    }
}

pub fn to_case(m: &MinedError, verdict: &JudgeVerdict, std: &Standardization) -> Result<CaseRecord> {
    Ok(CaseRecord {
        id: m.patient.id.clone(),
        age: m.patient.age,
        demographics: m.patient.subgroup(),
        clinical: Feature::CLINICAL
            .iter()
            .map(|f| (f.name().to_string(), m.patient.get(*f)))
            .collect(),
        true_outcome: m.patient.died_in_hospital,
        predicted_probability: m.score,
        error_type: m.error_type,
        bias_type: verdict.bias_type,
        judge_rationale: verdict.rationale.clone(),
        normalized_vector: std.normalize(&m.patient)?,
    })
}

/// Mines errors from training predictions, audits each with counterfactual
/// predictions and the judge, and selects the repository.
pub fn build_repository(
    train_predictions: &[(PatientRecord, f64)],
    threshold: f64,
    predictor: &dyn Predictor,
    judge: &dyn Judge,
    std: &Standardization,
    config: &CaseLibConfig,
) -> Result<Repository> {
    let mined = mine_errors(train_predictions, threshold);
    if mined.is_empty() {
        return Err(Error::Degenerate(format!(
            "no misclassified training cases at threshold {threshold}; review the threshold"
        )));
    }
    let ids: BTreeSet<&str> = mined.iter().map(|m| m.patient.id.as_str()).collect();
    if ids.len() != mined.len() {
        return Err(Error::invalid("duplicate patient ids among training predictions"));
    }
    info!("auditing {} mispredicted training cases", mined.len());

    let verdicts = bounded_map(&mined, config.max_in_flight.max(1), |_, m| -> Result<JudgeVerdict> {
        let pairs = make_counterfactuals(&m.patient);
        let mut outputs = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let pred = predictor.predict(&pair.variant, StrategyKind::Base, None)?;
            outputs.push((pair, pred.mortality_probability, pred.reasoning));
        }
        let original = predictor.predict(&m.patient, StrategyKind::Base, None)?;
        judge_case(
            &m.patient,
            original.mortality_probability,
            &outputs,
            config.delta,
            judge,
        )
    });

    let mut cases = Vec::with_capacity(mined.len());
    for (m, v) in mined.iter().zip(verdicts) {
        match v {
            Ok(v) => cases.push(to_case(m, &v, std)?),
            Err(e @ Error::Transport { .. }) => return Err(e),
            Err(e) => warn!("case {} skipped: {e}", m.patient.id),
        }
    }
    let selected = select_cases(cases, config.max_cases, config.seed);
    Ok(Repository {
        header: RepositoryHeader {
            schema_version: REPOSITORY_SCHEMA_VERSION,
            kind: "case_repository".into(),
            threshold,
            cases: selected.len(),
            mined_errors: mined.len(),
            standardization: std.clone(),
        },
        cases: selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{synth_cohort, Sex};

    fn patient(age: u32, sex: Sex, race: Race) -> PatientRecord {
        let mut p = synth_cohort(1, 3, None).unwrap().remove(0);
        p.age = age;
        p.sex = sex;
        p.race = race;
        p
    }

    #[test]
    fn mining_tags_errors() {
        let mut died = patient(70, Sex::Male, Race::White);
        died.died_in_hospital = true;
        died.id = "A".into();
        let mut lived = died.clone();
        lived.died_in_hospital = false;
        lived.id = "B".into();
        let m = mine_errors(&[(died.clone(), 0.3), (lived.clone(), 0.7)], 0.5);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].error_type, ErrorType::FalseNegative);
        assert_eq!(m[1].error_type, ErrorType::FalsePositive);
        assert!(mine_errors(&[(died, 0.9), (lived, 0.1)], 0.5).is_empty());
    }

    #[test]
    fn five_counterfactuals() {
        let p = patient(65, Sex::Male, Race::White);
        let pairs = make_counterfactuals(&p);
        assert_eq!(pairs.len(), 5);
        assert!(pairs
            .iter()
            .any(|c| c.variant.sex == Sex::Female && c.variant.clinical_vector() == p.clinical_vector()));
        for c in &pairs {
            let o = c.original.subgroup();
            let v = c.variant.subgroup();
            assert_eq!(o.matches_with(&v), 2, "{:?}", c.flipped_attribute);
            assert_eq!(c.variant.clinical_vector(), p.clinical_vector());
            assert_eq!(c.variant.id, p.id);
            assert_eq!(c.variant.died_in_hospital, p.died_in_hospital);
        }
    }

    #[test]
    fn age_reflection() {
        let p = patient(70, Sex::Female, Race::Black);
        let age = make_counterfactuals(&p)
            .into_iter()
            .find(|c| c.flipped_attribute == Attribute::AgeBand)
            .unwrap();
        assert_eq!(age.variant.age, 49);
        assert_eq!(age.variant.age_band(), AgeBand::Adult);
        assert_eq!(reflect_age(18), 95);
        assert_eq!(reflect_age(100), 19);
        assert_eq!(reflect_age(59), 60);
    }

    #[test]
    fn bias_type_parsing() {
        for b in BiasType::ALL {
            assert_eq!(b.as_str().parse::<BiasType>().unwrap(), b);
        }
        assert_eq!(
            "Racial Overestimation".parse::<BiasType>().unwrap(),
            BiasType::RacialOverestimation
        );
        assert!("vibes".parse::<BiasType>().is_err());
    }

    fn fake_case(i: usize, race: Race, bias: BiasType) -> CaseRecord {
        CaseRecord {
            id: format!("C{i:03}"),
            age: 70,
            demographics: SubgroupKey {
                sex: Sex::Male,
                age_band: AgeBand::Senior,
                race,
            },
            clinical: Feature::CLINICAL.iter().map(|f| (f.name().to_string(), 1.0)).collect(),
            true_outcome: true,
            predicted_probability: 0.2,
            error_type: if i % 2 == 0 {
                ErrorType::FalseNegative
            } else {
                ErrorType::FalsePositive
            },
            bias_type: bias,
            judge_rationale: String::new(),
            normalized_vector: vec![0.0; 15],
        }
    }

    #[test]
    fn stratified_selection_covers_races() {
        let biases = [
            BiasType::SexBasedAssumption,
            BiasType::RacialOverestimation,
            BiasType::AgeOverweighting,
        ];
        // heavily skewed: 85 white, 10 black, 4 other, 1 asian
        let cases: Vec<CaseRecord> = (0..100)
            .map(|i| {
                let race = match i {
                    0..85 => Race::White,
                    85..95 => Race::Black,
                    95..99 => Race::Other,
                    _ => Race::Asian,
                };
                fake_case(i, race, biases[i % 3])
            })
            .collect();
        let picked = select_cases(cases.clone(), 8, 5);
        assert_eq!(picked.len(), 8);
        let races: BTreeSet<Race> = picked.iter().map(|c| c.demographics.race).collect();
        assert_eq!(races.len(), 4);
        assert_eq!(picked, select_cases(cases.clone(), 8, 5));
        assert_eq!(select_cases(cases.clone(), 500, 5).len(), 100);
    }

    #[test]
    fn biased_cases_fill_first() {
        let mut cases: Vec<CaseRecord> = (0..10).map(|i| fake_case(i, Race::White, BiasType::None)).collect();
        cases.extend((10..13).map(|i| fake_case(i, Race::Black, BiasType::SexBasedAssumption)));
        let picked = select_cases(cases, 5, 1);
        assert_eq!(picked.iter().filter(|c| c.bias_type != BiasType::None).count(), 3);
        assert_eq!(picked.len(), 5);
    }
}
