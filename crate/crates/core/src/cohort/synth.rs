//! Synthetic ICU cohorts whose marginals follow the published baseline table.
//!
//! Clinical measurements share a latent severity factor so that sicker patients
//! are sicker across organ systems. In-hospital death is drawn from a logistic
//! function of standardized severity features; an optional [`BiasInjection`]
//! adds per-demographic offsets to that logit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DemographicValue, Feature, PatientRecord, Race, Sex, SubgroupKey};
use crate::error::{Error, Result};
use crate::util::{round_to, sigmoid};

/// Marginal and structural parameters for one clinical feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature: Feature,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub decimals: i32,
    /// Correlation with the latent severity factor, in [-1, 1].
    pub loading: f64,
    /// Draw on the log scale, matching `mean`/`sd` on the raw scale.
    #[serde(default)]
    pub lognormal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_min: u32,
    pub age_max: u32,
    pub female_fraction: f64,
    /// Probabilities for white, black, asian, other.
    pub race_mix: [f64; 4],
    pub features: Vec<FeatureSpec>,
    pub outcome_intercept: f64,
    /// Coefficients on standardized features (standardized with `mean`/`sd`).
    pub outcome_coefficients: Vec<(Feature, f64)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let f = |feature, mean, sd, min, max, decimals, loading| FeatureSpec {
            feature,
            mean,
            sd,
            min,
            max,
            decimals,
            loading,
            lognormal: false,
        };
        let mut features = vec![
            f(Feature::Gcs, 8.0, 4.6, 3.0, 15.0, 0, -0.5),
            f(Feature::ApacheIii, 29.3, 19.5, 0.0, 299.0, 0, 0.6),
            f(Feature::Sofa24h, 3.9, 2.4, 0.0, 24.0, 0, 0.6),
            f(Feature::Charlson, 5.1, 3.0, 0.0, 37.0, 0, 0.2),
            f(Feature::Spo2Min, 87.0, 4.4, 50.0, 100.0, 1, -0.4),
            f(Feature::HeartRate, 87.8, 17.4, 20.0, 250.0, 1, 0.3),
            f(Feature::RespRate, 19.3, 0.6, 4.0, 60.0, 1, 0.3),
            f(Feature::MapMean, 84.8, 2.9, 20.0, 200.0, 1, -0.3),
            f(Feature::CreatinineMax, 3.2, 1.0, 0.1, 25.0, 2, 0.4),
            f(Feature::LactateMax, 1.9, 0.4, 0.1, 30.0, 2, 0.5),
            f(Feature::TroponinMax, 0.8, 0.3, 0.0, 100.0, 2, 0.3),
            f(Feature::PlateletMin, 167.7, 10.1, 1.0, 1000.0, 1, -0.3),
            f(Feature::BilirubinMax, 1.9, 0.8, 0.1, 50.0, 2, 0.4),
            f(Feature::WbcMax, 17.2, 2.1, 0.1, 200.0, 2, 0.3),
            f(Feature::Urine24h, 1680.8, 1223.2, 0.0, 20000.0, 0, -0.4),
        ];
        features.last_mut().expect("urine spec").lognormal = true;
        SynthConfig {
            age_mean: 66.1,
            age_sd: 16.2,
            age_min: 18,
            age_max: 100,
            female_fraction: 0.446,
            race_mix: [0.541, 0.156, 0.011, 0.292],
            features,
            outcome_intercept: -2.37,
            outcome_coefficients: vec![
                (Feature::Sofa24h, 0.8),
                (Feature::ApacheIii, 0.6),
                (Feature::LactateMax, 0.5),
                (Feature::Age, 0.5),
                (Feature::Charlson, 0.3),
            ],
        }
    }
}

impl SynthConfig {
    /// Reference (mean, sd) for a numeric feature.
    pub fn reference(&self, feature: Feature) -> (f64, f64) {
        if feature == Feature::Age {
            return (self.age_mean, self.age_sd);
        }
        self.features
            .iter()
            .find(|s| s.feature == feature)
            .map(|s| (s.mean, s.sd))
            .expect("every clinical feature has a spec")
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.race_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.race_mix.iter().any(|p| *p < 0.0) {
            return Err(Error::config("race_mix must be non-negative and sum to 1"));
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return Err(Error::config("female_fraction must lie in [0, 1]"));
        }
        for spec in &self.features {
            if !(-1.0..=1.0).contains(&spec.loading) || spec.sd <= 0.0 {
                return Err(Error::config(format!("bad generator spec for {}", spec.feature)));
            }
        }
        Ok(())
    }
}

/// Per-demographic offsets added to the outcome logit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasInjection {
    pub offsets: Vec<(DemographicValue, f64)>,
}

impl BiasInjection {
    pub fn offset_for(&self, key: &SubgroupKey) -> f64 {
        self.offsets
            .iter()
            .filter(|(v, _)| v.matches(key))
            .map(|(_, o)| *o)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.iter().all(|(_, o)| *o == 0.0)
    }
}

impl FromStr for BiasInjection {
    type Err = Error;

    /// Parses `value=offset` pairs separated by commas, e.g. `male=0.5,black=0.3`.
    fn from_str(s: &str) -> Result<Self> {
        let mut offsets = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, num) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bias entry `{part}` is not value=offset")))?;
            let value: DemographicValue = name.trim().parse()?;
            let offset: f64 = num
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bias offset `{num}` is not a number")))?;
            if !offset.is_finite() {
                return Err(Error::invalid(format!("bias offset for `{name}` is not finite")));
            }
            offsets.push((value, offset));
        }
        Ok(BiasInjection { offsets })
    }
}

impl fmt::Display for BiasInjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.offsets.iter().map(|(v, o)| format!("{v}={o}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Probability of in-hospital death under the generating process.
pub fn outcome_probability(config: &SynthConfig, patient: &PatientRecord, bias: Option<&BiasInjection>) -> f64 {
    let mut logit = config.outcome_intercept;
    for (feature, beta) in &config.outcome_coefficients {
        let (mean, sd) = config.reference(*feature);
        logit += beta * (patient.get(*feature) - mean) / sd;
    }
    if let Some(b) = bias {
        logit += b.offset_for(&patient.subgroup());
    }
    sigmoid(logit)
}

pub fn synth_cohort(n: usize, seed: u64, bias: Option<&BiasInjection>) -> Result<Vec<PatientRecord>> {
    synth_cohort_with(&SynthConfig::default(), n, seed, bias)
}

pub fn synth_cohort_with(
    config: &SynthConfig,
    n: usize,
    seed: u64,
    bias: Option<&BiasInjection>,
) -> Result<Vec<PatientRecord>> {
    if n == 0 {
        return Err(Error::invalid("cohort size must be at least 1"));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(6);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let age = (config.age_mean + config.age_sd * z)
            .round()
            .clamp(f64::from(config.age_min), f64::from(config.age_max)) as u32;
        let sex = if rng.random::<f64>() < config.female_fraction {
            Sex::Female
        } else {
            Sex::Male
        };
        let race = pick_race(&config.race_mix, rng.random::<f64>());

        let severity: f64 = rng.sample(StandardNormal);
        let mut p = PatientRecord {
            id: format!("P{:0width$}", i + 1),
            age,
            sex,
            race,
            gcs: 0.0,
            apache_iii: 0.0,
            sofa_24h: 0.0,
            charlson: 0.0,
            spo2_min: 0.0,
            heart_rate: 0.0,
            resp_rate: 0.0,
            map_mean: 0.0,
            creatinine_max: 0.0,
            lactate_max: 0.0,
            troponin_max: 0.0,
            platelet_min: 0.0,
            bilirubin_max: 0.0,
            wbc_max: 0.0,
            urine_24h: 0.0,
            mech_vent: false,
            code_status: false,
            died_in_hospital: false,
        };
        for spec in &config.features {
            let noise: f64 = rng.sample(StandardNormal);
            let z = spec.loading * severity + (1.0 - spec.loading * spec.loading).sqrt() * noise;
            let raw = if spec.lognormal {
                let sigma2 = (1.0 + (spec.sd / spec.mean).powi(2)).ln();
                let mu = spec.mean.ln() - sigma2 / 2.0;
                (mu + sigma2.sqrt() * z).exp()
            } else {
                spec.mean + spec.sd * z
            };
            p.set(spec.feature, round_to(raw.clamp(spec.min, spec.max), spec.decimals));
        }
        let prob = outcome_probability(config, &p, bias);
        p.died_in_hospital = rng.random::<f64>() < prob;
        out.push(p);
    }
    Ok(out)
}

fn pick_race(mix: &[f64; 4], u: f64) -> Race {
    let mut acc = 0.0;
    for (race, p) in Race::ALL.iter().zip(mix) {
        acc += p;
        if u < acc {
            return *race;
        }
    }
    Race::Other
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{write_cohort_csv, AgeBand};

    #[test]
    fn zero_size_is_an_error() {
        assert!(synth_cohort(0, 1, None).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_cohort(500, 7, None).unwrap();
        let b = synth_cohort(500, 7, None).unwrap();
        assert_eq!(write_cohort_csv(&a), write_cohort_csv(&b));
        let c = synth_cohort(500, 8, None).unwrap();
        assert_ne!(write_cohort_csv(&a), write_cohort_csv(&c));
    }

    #[test]
    fn marginals_follow_reference_table() {
        let cohort = synth_cohort(10_000, 7, None).unwrap();
        let n = cohort.len() as f64;
        let mean_age = cohort.iter().map(|p| f64::from(p.age)).sum::<f64>() / n;
        assert!((65.1..=67.1).contains(&mean_age), "mean age {mean_age}");
        let female = cohort.iter().filter(|p| p.sex == Sex::Female).count() as f64 / n;
        assert!((0.43..=0.46).contains(&female), "female fraction {female}");
        let mortality = cohort.iter().filter(|p| p.died_in_hospital).count() as f64 / n;
        assert!((0.124..=0.164).contains(&mortality), "mortality {mortality}");
        for (race, want) in Race::ALL.iter().zip([0.541, 0.156, 0.011, 0.292]) {
            let got = cohort.iter().filter(|p| p.race == *race).count() as f64 / n;
            assert!((got - want).abs() < 0.015, "{race}: {got} vs {want}");
        }
        assert!(cohort.iter().all(|p| !p.mech_vent && !p.code_status));
        assert!(cohort.iter().all(|p| p.validate().is_ok()));
        assert!(cohort
            .iter()
            .all(|p| p.subgroup().age_band == AgeBand::of_age(p.age) && p.age >= 18));
    }

    #[test]
    fn bias_spec_parsing() {
        let b: BiasInjection = "male=0.5, black=-0.25".parse().unwrap();
        assert_eq!(b.offsets.len(), 2);
        assert_eq!(b.to_string(), "male=0.5,black=-0.25");
        assert!("wizard=1".parse::<BiasInjection>().is_err());
        assert!("male".parse::<BiasInjection>().is_err());
        assert!("male=abc".parse::<BiasInjection>().is_err());
    }

    #[test]
    fn injected_offset_raises_group_probability() {
        let cohort = synth_cohort(50, 3, None).unwrap();
        let bias: BiasInjection = "male=0.5".parse().unwrap();
        let config = SynthConfig::default();
        for p in &cohort {
            let base = outcome_probability(&config, p, None);
            let biased = outcome_probability(&config, p, Some(&bias));
            if p.sex == Sex::Male {
                assert!(biased > base);
            } else {
                assert_eq!(biased, base);
            }
        }
    }
}
