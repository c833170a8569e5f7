//! Feature-reliance probe over the key factors a predictor reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Feature, SubgroupKey, SubgroupPattern};
use crate::error::{Error, Result};

/// Canonical name for phrases the vocabulary cannot place.
pub const UNMAPPED: &str = "other_unmapped";

const DEFAULT_ALIASES: &[(&str, &[&str])] = &[
    ("age", &["age", "patient age", "advanced age", "older age", "elderly"]),
    (
        "gcs",
        &[
            "gcs",
            "glasgow coma scale",
            "glasgow coma score",
            "glasgow",
            "gcs score",
            "consciousness",
        ],
    ),
    (
        "apache_iii",
        &["apache iii", "apache 3", "apache", "apache score", "apache iii score"],
    ),
    (
        "sofa_24h",
        &[
            "sofa",
            "sofa score",
            "sofa 24h",
            "24h sofa",
            "sequential organ failure assessment",
            "organ failure score",
        ],
    ),
    (
        "charlson",
        &[
            "charlson",
            "charlson index",
            "charlson comorbidity index",
            "cci",
            "comorbidity",
            "comorbidities",
        ],
    ),
    (
        "spo2_min",
        &[
            "spo2",
            "spo2 min",
            "minimum spo2",
            "oxygen saturation",
            "hypoxemia",
            "hypoxia",
            "saturation",
        ],
    ),
    (
        "heart_rate",
        &["heart rate", "hr", "pulse", "tachycardia", "bradycardia"],
    ),
    (
        "resp_rate",
        &["respiratory rate", "resp rate", "rr", "tachypnea", "breathing rate"],
    ),
    (
        "map_mean",
        &[
            "map",
            "mean arterial pressure",
            "mean map",
            "blood pressure",
            "hypotension",
        ],
    ),
    (
        "creatinine_max",
        &[
            "creatinine",
            "max creatinine",
            "serum creatinine",
            "renal function",
            "kidney function",
            "acute kidney injury",
            "aki",
        ],
    ),
    (
        "lactate_max",
        &[
            "lactate",
            "max lactate",
            "lactic acid",
            "serum lactate",
            "hyperlactatemia",
        ],
    ),
    (
        "troponin_max",
        &[
            "troponin",
            "max troponin",
            "troponin t",
            "troponin i",
            "cardiac troponin",
        ],
    ),
    (
        "platelet_min",
        &[
            "platelet",
            "platelets",
            "platelet count",
            "min platelet",
            "thrombocytopenia",
        ],
    ),
    (
        "bilirubin_max",
        &["bilirubin", "max bilirubin", "total bilirubin", "hyperbilirubinemia"],
    ),
    (
        "wbc_max",
        &[
            "wbc",
            "white blood cell",
            "white blood cells",
            "white blood cell count",
            "leukocytes",
            "leukocytosis",
            "white count",
        ],
    ),
    (
        "urine_24h",
        &[
            "urine",
            "urine output",
            "24h urine",
            "urine 24h",
            "oliguria",
            "diuresis",
        ],
    ),
    (
        "mech_vent",
        &[
            "mechanical ventilation",
            "mech vent",
            "ventilation",
            "ventilator",
            "intubation",
            "intubated",
        ],
    ),
    (
        "code_status",
        &["code status", "dnr", "do not resuscitate", "dnr status"],
    ),
    ("sex", &["sex", "gender", "male", "female", "male sex", "female sex"]),
    (
        "race",
        &["race", "ethnicity", "white", "black", "asian", "african american"],
    ),
];

/// Lowercases and drops every character that is not a letter or digit.
pub fn normalize_phrase(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

fn words(raw: &str) -> Vec<String> {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorVocabulary {
    canonical: Vec<String>,
    aliases: HashMap<String, String>,
    longest_alias_words: usize,
}

impl Default for FactorVocabulary {
    fn default() -> Self {
        let mut v = FactorVocabulary {
            canonical: Vec::new(),
            aliases: HashMap::new(),
            longest_alias_words: 1,
        };
        for (canon, phrases) in DEFAULT_ALIASES {
            for phrase in phrases.iter().chain(std::iter::once(canon)) {
                v.insert(phrase, canon);
            }
        }
        for f in Feature::NUMERIC {
            v.insert(f.label(), f.name());
        }
        v
    }
}

impl FactorVocabulary {
    pub fn empty() -> Self {
        FactorVocabulary {
            canonical: Vec::new(),
            aliases: HashMap::new(),
            longest_alias_words: 1,
        }
    }

    /// Adds (or overrides) one alias.
    pub fn insert(&mut self, phrase: &str, canonical: &str) {
        if !self.canonical.iter().any(|c| c == canonical) {
            self.canonical.push(canonical.to_string());
        }
        self.aliases.insert(normalize_phrase(phrase), canonical.to_string());
        self.aliases.insert(normalize_phrase(canonical), canonical.to_string());
        self.longest_alias_words = self.longest_alias_words.max(words(phrase).len());
    }

    pub fn canonical_names(&self) -> &[String] {
        &self.canonical
    }

    /// Parses `raw phrase => canonical_name` lines; `#` starts a comment.
    pub fn extend_from_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (phrase, canon) = line
                .split_once("=>")
                .ok_or_else(|| Error::Parse(format!("alias line {}: expected `phrase => canonical_name`", i + 1)))?;
            let (phrase, canon) = (phrase.trim(), canon.trim());
            if phrase.is_empty() || canon.is_empty() || canon.contains(char::is_whitespace) {
                return Err(Error::Parse(format!(
                    "alias line {}: malformed mapping `{line}`",
                    i + 1
                )));
            }
            self.insert(phrase, canon);
        }
        Ok(())
    }

    pub fn load_aliases(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.extend_from_str(&text)
    }

    /// Maps one phrase. The whole phrase is tried first; failing that, the
    /// longest run of consecutive words that is itself an alias wins, leftmost
    /// first, so "elevated lactate (4.2)" maps to lactate.
    pub fn canonical_of(&self, raw: &str) -> &str {
        if let Some(c) = self.aliases.get(&normalize_phrase(raw)) {
            return c;
        }
        let w = words(raw);
        for len in (1..=self.longest_alias_words.min(w.len())).rev() {
            for window in w.windows(len) {
                if let Some(c) = self.aliases.get(&window.concat()) {
                    return c;
                }
            }
        }
        UNMAPPED
    }

    pub fn canonicalize<S: AsRef<str>>(&self, raw_factors: &[S]) -> Vec<String> {
        raw_factors
            .iter()
            .map(|r| self.canonical_of(r.as_ref()).to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelianceProfile {
    pub subgroup: SubgroupPattern,
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
    pub predictions: usize,
}

impl RelianceProfile {
    pub fn frequency(&self, feature: &str) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(feature).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn unmapped(&self) -> u64 {
        self.counts.get(UNMAPPED).copied().unwrap_or(0)
    }

    /// Up to `k` most frequent features, ties in lexicographic order.
    pub fn top_k(&self, k: usize) -> Vec<&str> {
        let mut v: Vec<(&String, &u64)> = self.counts.iter().filter(|(_, &c)| c > 0).collect();
        v.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        v.into_iter().take(k).map(|(n, _)| n.as_str()).collect()
    }
}

/// Pools the factors of every prediction whose subgroup matches `key`.
pub fn profile<'a, I, S>(predictions: I, key: SubgroupPattern, vocab: &FactorVocabulary) -> Result<RelianceProfile>
where
    I: IntoIterator<Item = (&'a SubgroupKey, &'a [S])>,
    S: AsRef<str> + 'a,
{
    let mut counts = BTreeMap::new();
    let mut total = 0;
    let mut n = 0;
    for (subgroup, factors) in predictions {
        if !key.matches(subgroup) {
            continue;
        }
        n += 1;
        for f in factors {
            *counts.entry(vocab.canonical_of(f.as_ref()).to_string()).or_insert(0) += 1;
            total += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate(format!("no predictions in subgroup `{key}`")));
    }
    Ok(RelianceProfile {
        subgroup: key,
        counts,
        total,
        predictions: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelianceSimilarity {
    pub topk_jaccard: f64,
    pub all_jaccard: f64,
    pub cosine: f64,
    pub js_divergence: f64,
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn similarity(a: &RelianceProfile, b: &RelianceProfile, k: usize) -> Result<RelianceSimilarity> {
    if k < 1 {
        return Err(Error::invalid("top-k needs k >= 1"));
    }
    if a.total == 0 || b.total == 0 {
        return Err(Error::Degenerate("reliance profile has no factors".into()));
    }
    let top_a: BTreeSet<&str> = a.top_k(k).into_iter().collect();
    let top_b: BTreeSet<&str> = b.top_k(k).into_iter().collect();
    let support = |p: &'_ RelianceProfile| -> BTreeSet<String> {
        p.counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(n, _)| n.clone())
            .collect()
    };
    let (sa, sb) = (support(a), support(b));
    let union: BTreeSet<&str> = sa.iter().chain(&sb).map(String::as_str).collect();
    let sa_ref: BTreeSet<&str> = sa.iter().map(String::as_str).collect();
    let sb_ref: BTreeSet<&str> = sb.iter().map(String::as_str).collect();

    let pa: Vec<f64> = union.iter().map(|f| a.frequency(f)).collect();
    let pb: Vec<f64> = union.iter().map(|f| b.frequency(f)).collect();
    let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
    let na = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = (dot / (na * nb)).clamp(0.0, 1.0);

    let kl = |p: &[f64], m: &[f64]| -> f64 {
        p.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| 0.5 * (x + y)).collect();
    let js = (0.5 * kl(&pa, &m) + 0.5 * kl(&pb, &m)).clamp(0.0, 1.0);

    Ok(RelianceSimilarity {
        topk_jaccard: jaccard(&top_a, &top_b),
        all_jaccard: jaccard(&sa_ref, &sb_ref),
        cosine,
        js_divergence: js,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{AgeBand, DemographicValue, Race, Sex};

    fn key(sex: Sex) -> SubgroupKey {
        SubgroupKey {
            sex,
            age_band: AgeBand::Senior,
            race: Race::White,
        }
    }

    fn prof(counts: &[(&str, u64)]) -> RelianceProfile {
        let counts: BTreeMap<String, u64> = counts.iter().map(|(n, c)| (n.to_string(), *c)).collect();
        RelianceProfile {
            subgroup: SubgroupPattern::ALL,
            total: counts.values().sum(),
            counts,
            predictions: 1,
        }
    }

    #[test]
    fn canonicalize_examples() {
        let v = FactorVocabulary::default();
        assert_eq!(v.canonical_of("SOFA score"), "sofa_24h");
        assert_eq!(v.canonical_of("APACHE-III"), "apache_iii");
        assert_eq!(v.canonical_of("tea leaves"), UNMAPPED);
        assert_eq!(v.canonical_of("Elevated lactate (4.2 mmol/L)"), "lactate_max");
        assert_eq!(v.canonical_of("low Glasgow Coma Scale"), "gcs");
        assert_eq!(v.canonical_of("dosage"), UNMAPPED);
    }

    #[test]
    fn alias_file() {
        let mut v = FactorVocabulary::default();
        v.extend_from_str("# comment\nfrailty index => frailty\n\nSOFA => sofa_24h # again\n")
            .unwrap();
        assert_eq!(v.canonical_of("Frailty-Index"), "frailty");
        assert!(v.canonical_names().iter().any(|c| c == "frailty"));
        assert!(v.extend_from_str("no arrow here").is_err());
    }

    #[test]
    fn profile_counts() {
        let v = FactorVocabulary::default();
        let m = key(Sex::Male);
        let f1 = vec!["sofa".to_string(), "lactate".into(), "age".into()];
        let f2 = f1.clone();
        let items = vec![(&m, f1.as_slice()), (&m, f2.as_slice())];
        let p = profile(items.iter().copied(), SubgroupPattern::ALL, &v).unwrap();
        assert_eq!(p.total, 6);
        assert_eq!(p.counts["sofa_24h"], 2);
        assert_eq!(p.counts["lactate_max"], 2);
        assert_eq!(p.counts["age"], 2);
        let p1 = profile(items[..1].iter().copied(), SubgroupPattern::ALL, &v).unwrap();
        assert_eq!(p1.total, 3);
        let female = SubgroupPattern::of(DemographicValue::Sex(Sex::Female));
        assert!(profile(items.iter().copied(), female, &v).is_err());
    }

    #[test]
    fn alias_merge_fixture() {
        let v = FactorVocabulary::default();
        let k = key(Sex::Female);
        let rows: Vec<Vec<String>> = [
            ["SOFA score", "Lactate", "age"],
            ["sofa", "lactic acid", "Age"],
            ["Sequential Organ Failure Assessment", "serum lactate", "creatinine"],
            ["SOFA-24h", "max lactate", "tea leaves"],
            ["sofa_24h", "LACTATE", "GCS"],
        ]
        .iter()
        .map(|r| r.iter().map(|s| s.to_string()).collect())
        .collect();
        let p = profile(rows.iter().map(|r| (&k, r.as_slice())), SubgroupPattern::ALL, &v).unwrap();
        let expect: BTreeMap<String, u64> = [
            ("sofa_24h", 5),
            ("lactate_max", 5),
            ("age", 2),
            ("creatinine_max", 1),
            ("gcs", 1),
            (UNMAPPED, 1),
        ]
        .iter()
        .map(|(n, c)| (n.to_string(), *c))
        .collect();
        assert_eq!(p.counts, expect);
        assert_eq!(p.total, 15);
    }

    #[test]
    fn similarity_examples() {
        let a = prof(&[("sofa_24h", 5), ("lactate_max", 4), ("age", 3), ("gcs", 1)]);
        let s = similarity(&a, &a, 3).unwrap();
        assert_eq!(s.topk_jaccard, 1.0);
        assert!((s.cosine - 1.0).abs() < 1e-12);
        assert!(s.js_divergence.abs() < 1e-12);

        let b = prof(&[("sofa_24h", 5), ("lactate_max", 4), ("creatinine_max", 3)]);
        assert_eq!(similarity(&a, &b, 3).unwrap().topk_jaccard, 0.5);

        let x = prof(&[("sofa_24h", 3)]);
        let y = prof(&[("lactate_max", 3)]);
        let s = similarity(&x, &y, 3).unwrap();
        assert_eq!(s.cosine, 0.0);
        assert!((s.js_divergence - 1.0).abs() < 1e-12);
        assert!(similarity(&x, &y, 0).is_err());
    }

    #[test]
    fn top_k_ties_are_lexicographic() {
        let a = prof(&[("b", 2), ("a", 2), ("c", 2), ("d", 5)]);
        assert_eq!(a.top_k(3), vec!["d", "a", "b"]);
    }
}
