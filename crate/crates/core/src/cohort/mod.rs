//! Patient data model, cohort ingestion, synthetic generation, splitting and
//! split-balance diagnostics.

mod balance;
mod csv;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use balance::{balance_test, chi_square_test, welch_t_test, BalanceKind, BalanceResult};
pub use csv::{ingest_csv, parse_cohort_csv, write_cohort_csv, IngestReport, RejectedRow, CSV_HEADER};
pub use split::{split, CohortSplit};
pub use synth::{outcome_probability, synth_cohort, synth_cohort_with, BiasInjection, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Race {
    White,
    Black,
    Asian,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "18-59")]
    Adult,
    #[serde(rename = "60+")]
    Senior,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Male, Sex::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }

    pub fn flipped(self) -> Sex {
        match self {
            Sex::Male => Sex::Female,
            Sex::Female => Sex::Male,
        }
    }
}

impl Race {
    pub const ALL: [Race; 4] = [Race::White, Race::Black, Race::Asian, Race::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Race::White => "white",
            Race::Black => "black",
            Race::Asian => "asian",
            Race::Other => "other",
        }
    }
}

impl AgeBand {
    pub const ALL: [AgeBand; 2] = [AgeBand::Adult, AgeBand::Senior];

    /// 59/60 boundary.
    pub fn of_age(age: u32) -> AgeBand {
        if age >= 60 {
            AgeBand::Senior
        } else {
            AgeBand::Adult
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeBand::Adult => "18-59",
            AgeBand::Senior => "60+",
        }
    }
}

macro_rules! impl_text {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let t = s.trim();
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str().eq_ignore_ascii_case(t))
                    .ok_or_else(|| Error::invalid(format!("unknown {} `{}`", $what, s)))
            }
        }
    };
}

impl_text!(Sex, "sex");
impl_text!(Race, "race");
impl_text!(AgeBand, "age band");

/// Demographic dimension of the subgroup lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Sex,
    AgeBand,
    Race,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Sex, Attribute::AgeBand, Attribute::Race];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Sex => "sex",
            Attribute::AgeBand => "age_band",
            Attribute::Race => "race",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value of one demographic attribute, e.g. `male` or `60+`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DemographicValue {
    Sex(Sex),
    AgeBand(AgeBand),
    Race(Race),
}

impl DemographicValue {
    pub fn attribute(self) -> Attribute {
        match self {
            DemographicValue::Sex(_) => Attribute::Sex,
            DemographicValue::AgeBand(_) => Attribute::AgeBand,
            DemographicValue::Race(_) => Attribute::Race,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DemographicValue::Sex(s) => s.as_str(),
            DemographicValue::AgeBand(a) => a.as_str(),
            DemographicValue::Race(r) => r.as_str(),
        }
    }

    pub fn matches(self, key: &SubgroupKey) -> bool {
        match self {
            DemographicValue::Sex(s) => key.sex == s,
            DemographicValue::AgeBand(a) => key.age_band == a,
            DemographicValue::Race(r) => key.race == r,
        }
    }
}

impl fmt::Display for DemographicValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DemographicValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(v) = s.parse::<Sex>() {
            return Ok(DemographicValue::Sex(v));
        }
        if let Ok(v) = s.parse::<AgeBand>() {
            return Ok(DemographicValue::AgeBand(v));
        }
        if let Ok(v) = s.parse::<Race>() {
            return Ok(DemographicValue::Race(v));
        }
        Err(Error::invalid(format!("unknown demographic value `{s}`")))
    }
}

impl Serialize for DemographicValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DemographicValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Full coordinate `(sex, age band, race)` in the subgroup lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub sex: Sex,
    pub age_band: AgeBand,
    pub race: Race,
}

impl SubgroupKey {
    /// All 16 full keys in lattice order (sex, then age band, then race).
    pub fn lattice() -> Vec<SubgroupKey> {
        let mut keys = Vec::with_capacity(16);
        for sex in Sex::ALL {
            for age_band in AgeBand::ALL {
                for race in Race::ALL {
                    keys.push(SubgroupKey { sex, age_band, race });
                }
            }
        }
        keys
    }

    pub fn value(&self, attribute: Attribute) -> DemographicValue {
        match attribute {
            Attribute::Sex => DemographicValue::Sex(self.sex),
            Attribute::AgeBand => DemographicValue::AgeBand(self.age_band),
            Attribute::Race => DemographicValue::Race(self.race),
        }
    }

    /// Number of attributes on which two keys agree (0..=3).
    pub fn matches_with(&self, other: &SubgroupKey) -> u8 {
        u8::from(self.sex == other.sex) + u8::from(self.age_band == other.age_band) + u8::from(self.race == other.race)
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.sex, self.age_band, self.race)
    }
}

/// A full or marginal subgroup selector; `None` means "any".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SubgroupPattern {
    pub sex: Option<Sex>,
    pub age_band: Option<AgeBand>,
    pub race: Option<Race>,
}

impl SubgroupPattern {
    pub const ALL: SubgroupPattern = SubgroupPattern {
        sex: None,
        age_band: None,
        race: None,
    };

    pub fn of(value: DemographicValue) -> SubgroupPattern {
        let mut p = SubgroupPattern::ALL;
        match value {
            DemographicValue::Sex(s) => p.sex = Some(s),
            DemographicValue::AgeBand(a) => p.age_band = Some(a),
            DemographicValue::Race(r) => p.race = Some(r),
        }
        p
    }

    pub fn full(key: SubgroupKey) -> SubgroupPattern {
        SubgroupPattern {
            sex: Some(key.sex),
            age_band: Some(key.age_band),
            race: Some(key.race),
        }
    }

    pub fn matches(&self, key: &SubgroupKey) -> bool {
        self.sex.is_none_or(|s| s == key.sex)
            && self.age_band.is_none_or(|a| a == key.age_band)
            && self.race.is_none_or(|r| r == key.race)
    }
}

impl fmt::Display for SubgroupPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            self.sex.map(Sex::as_str),
            self.age_band.map(AgeBand::as_str),
            self.race.map(Race::as_str),
        ]
        .into_iter()
        .flatten()
        .collect();
        if parts.is_empty() {
            f.write_str("all")
        } else {
            f.write_str(&parts.join("/"))
        }
    }
}

/// One ICU stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub age: u32,
    pub sex: Sex,
    pub race: Race,
    pub gcs: f64,
    pub apache_iii: f64,
    pub sofa_24h: f64,
    pub charlson: f64,
    pub spo2_min: f64,
    pub heart_rate: f64,
    pub resp_rate: f64,
    pub map_mean: f64,
    pub creatinine_max: f64,
    pub lactate_max: f64,
    pub troponin_max: f64,
    pub platelet_min: f64,
    pub bilirubin_max: f64,
    pub wbc_max: f64,
    pub urine_24h: f64,
    pub mech_vent: bool,
    pub code_status: bool,
    pub died_in_hospital: bool,
}

impl PatientRecord {
    pub fn age_band(&self) -> AgeBand {
        AgeBand::of_age(self.age)
    }

    pub fn subgroup(&self) -> SubgroupKey {
        SubgroupKey {
            sex: self.sex,
            age_band: self.age_band(),
            race: self.race,
        }
    }

    pub fn get(&self, feature: Feature) -> f64 {
        match feature {
            Feature::Age => f64::from(self.age),
            Feature::Gcs => self.gcs,
            Feature::ApacheIii => self.apache_iii,
            Feature::Sofa24h => self.sofa_24h,
            Feature::Charlson => self.charlson,
            Feature::Spo2Min => self.spo2_min,
            Feature::HeartRate => self.heart_rate,
            Feature::RespRate => self.resp_rate,
            Feature::MapMean => self.map_mean,
            Feature::CreatinineMax => self.creatinine_max,
            Feature::LactateMax => self.lactate_max,
            Feature::TroponinMax => self.troponin_max,
            Feature::PlateletMin => self.platelet_min,
            Feature::BilirubinMax => self.bilirubin_max,
            Feature::WbcMax => self.wbc_max,
            Feature::Urine24h => self.urine_24h,
        }
    }

    pub fn set(&mut self, feature: Feature, value: f64) {
        match feature {
            Feature::Age => self.age = value.round().max(0.0) as u32,
            Feature::Gcs => self.gcs = value,
            Feature::ApacheIii => self.apache_iii = value,
            Feature::Sofa24h => self.sofa_24h = value,
            Feature::Charlson => self.charlson = value,
            Feature::Spo2Min => self.spo2_min = value,
            Feature::HeartRate => self.heart_rate = value,
            Feature::RespRate => self.resp_rate = value,
            Feature::MapMean => self.map_mean = value,
            Feature::CreatinineMax => self.creatinine_max = value,
            Feature::LactateMax => self.lactate_max = value,
            Feature::TroponinMax => self.troponin_max = value,
            Feature::PlateletMin => self.platelet_min = value,
            Feature::BilirubinMax => self.bilirubin_max = value,
            Feature::WbcMax => self.wbc_max = value,
            Feature::Urine24h => self.urine_24h = value,
        }
    }

    /// Looks a numeric feature up by its column name.
    pub fn get_named(&self, name: &str) -> Option<f64> {
        Feature::from_name(name).map(|f| self.get(f))
    }

    /// Clinical feature vector in [`Feature::CLINICAL`] order.
    pub fn clinical_vector(&self) -> Vec<f64> {
        Feature::CLINICAL.iter().map(|f| self.get(*f)).collect()
    }

    /// Checks every field against its physical range.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.id.is_empty() {
            return Err(("id", "empty id".into()));
        }
        if self.age < 18 {
            return Err(("age", format!("age {} below adult inclusion minimum 18", self.age)));
        }
        if self.age > 120 {
            return Err(("age", format!("age {} above 120", self.age)));
        }
        for f in Feature::CLINICAL {
            let v = self.get(f);
            if let Err(msg) = f.check_range(v) {
                return Err((f.name(), msg));
            }
        }
        Ok(())
    }
}

/// Numeric patient features: age plus the fifteen clinical measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Age,
    Gcs,
    ApacheIii,
    #[serde(rename = "sofa_24h")]
    Sofa24h,
    Charlson,
    #[serde(rename = "spo2_min")]
    Spo2Min,
    HeartRate,
    RespRate,
    MapMean,
    CreatinineMax,
    LactateMax,
    TroponinMax,
    PlateletMin,
    BilirubinMax,
    WbcMax,
    #[serde(rename = "urine_24h")]
    Urine24h,
}

impl Feature {
    /// Clinical features (demographics excluded), in CSV column order.
    pub const CLINICAL: [Feature; 15] = [
        Feature::Gcs,
        Feature::ApacheIii,
        Feature::Sofa24h,
        Feature::Charlson,
        Feature::Spo2Min,
        Feature::HeartRate,
        Feature::RespRate,
        Feature::MapMean,
        Feature::CreatinineMax,
        Feature::LactateMax,
        Feature::TroponinMax,
        Feature::PlateletMin,
        Feature::BilirubinMax,
        Feature::WbcMax,
        Feature::Urine24h,
    ];

    /// Age followed by the clinical features.
    pub const NUMERIC: [Feature; 16] = [
        Feature::Age,
        Feature::Gcs,
        Feature::ApacheIii,
        Feature::Sofa24h,
        Feature::Charlson,
        Feature::Spo2Min,
        Feature::HeartRate,
        Feature::RespRate,
        Feature::MapMean,
        Feature::CreatinineMax,
        Feature::LactateMax,
        Feature::TroponinMax,
        Feature::PlateletMin,
        Feature::BilirubinMax,
        Feature::WbcMax,
        Feature::Urine24h,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Age => "age",
            Feature::Gcs => "gcs",
            Feature::ApacheIii => "apache_iii",
            Feature::Sofa24h => "sofa_24h",
            Feature::Charlson => "charlson",
            Feature::Spo2Min => "spo2_min",
            Feature::HeartRate => "heart_rate",
            Feature::RespRate => "resp_rate",
            Feature::MapMean => "map_mean",
            Feature::CreatinineMax => "creatinine_max",
            Feature::LactateMax => "lactate_max",
            Feature::TroponinMax => "troponin_max",
            Feature::PlateletMin => "platelet_min",
            Feature::BilirubinMax => "bilirubin_max",
            Feature::WbcMax => "wbc_max",
            Feature::Urine24h => "urine_24h",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::NUMERIC.iter().copied().find(|f| f.name() == name)
    }

    /// Human-readable label with unit, used in prompts.
    pub fn label(self) -> &'static str {
        match self {
            Feature::Age => "Age (years)",
            Feature::Gcs => "GCS score",
            Feature::ApacheIii => "APACHE III score",
            Feature::Sofa24h => "SOFA score (24 h)",
            Feature::Charlson => "Charlson Comorbidity Index",
            Feature::Spo2Min => "SpO2 min (%)",
            Feature::HeartRate => "Heart rate (beats/min)",
            Feature::RespRate => "Respiratory rate (breaths/min)",
            Feature::MapMean => "Mean arterial pressure (mmHg)",
            Feature::CreatinineMax => "Creatinine max (mg/dL)",
            Feature::LactateMax => "Lactate max (mmol/L)",
            Feature::TroponinMax => "Troponin max (ng/mL)",
            Feature::PlateletMin => "Platelet min (10^3/uL)",
            Feature::BilirubinMax => "Bilirubin max (mg/dL)",
            Feature::WbcMax => "WBC max (10^3/uL)",
            Feature::Urine24h => "24-hour urine output (mL)",
        }
    }

    /// Laboratory measurements are rendered with two decimals, everything else with one.
    pub fn is_lab(self) -> bool {
        matches!(
            self,
            Feature::CreatinineMax
                | Feature::LactateMax
                | Feature::TroponinMax
                | Feature::PlateletMin
                | Feature::BilirubinMax
                | Feature::WbcMax
                | Feature::Urine24h
        )
    }

    pub fn check_range(self, v: f64) -> std::result::Result<(), String> {
        if !v.is_finite() {
            return Err(format!("non-finite value {v}"));
        }
        let (lo, hi, lo_open) = match self {
            Feature::Age => (18.0, 120.0, false),
            Feature::Gcs => (3.0, 15.0, false),
            Feature::Sofa24h => (0.0, 24.0, false),
            Feature::Spo2Min => (0.0, 100.0, false),
            Feature::HeartRate | Feature::RespRate | Feature::MapMean => (0.0, f64::INFINITY, true),
            _ => (0.0, f64::INFINITY, false),
        };
        let below = if lo_open { v <= lo } else { v < lo };
        if below || v > hi {
            let lo_sym = if lo_open { "(" } else { "[" };
            return Err(format!("value {v} outside {lo_sym}{lo}, {hi}]"));
        }
        Ok(())
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
