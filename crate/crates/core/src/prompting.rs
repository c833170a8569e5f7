//! Four prompt strategies in a shared four-section layout, and parsing of the
//! structured prediction block a predictor returns.
//!
//! Each strategy extends the previous one by insertion only: fairness adds a
//! prefix to the decision constraints, system2 adds stepwise instructions
//! after that prefix, and cap fills the case-information section.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cohort::{Feature, PatientRecord};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Base,
    Fairness,
    System2,
    Cap,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Base,
        StrategyKind::Fairness,
        StrategyKind::System2,
        StrategyKind::Cap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Base => "base",
            StrategyKind::Fairness => "fairness",
            StrategyKind::System2 => "system2",
            StrategyKind::Cap => "cap",
        }
    }

    fn has_fairness(self) -> bool {
        self != StrategyKind::Base
    }

    fn has_steps(self) -> bool {
        matches!(self, StrategyKind::System2 | StrategyKind::Cap)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}` (base, fairness, system2, cap)")))
    }
}

pub const SECTION_HEADERS: [&str; 4] = [
    "## Role Definition",
    "## Task Description",
    "## Decision Constraints",
    "## Case Information",
];

/// Body of an empty case-information section.
pub const NO_CASE: &str = "No reference case is provided.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub role_definition: String,
    pub task_description: String,
    pub decision_constraints: String,
    pub fairness_prefix: String,
    pub system2_steps: String,
    pub case_information: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            role_definition: include_str!("../templates/role_definition.txt").into(),
            task_description: include_str!("../templates/task_description.txt").into(),
            decision_constraints: include_str!("../templates/decision_constraints.txt").into(),
            fairness_prefix: include_str!("../templates/fairness_prefix.txt").into(),
            system2_steps: include_str!("../templates/system2_steps.txt").into(),
            case_information: include_str!("../templates/case_information.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Loads templates from a directory; files that are absent keep the
    /// built-in text.
    pub fn from_dir(dir: &Path) -> Result<PromptTemplates> {
        let mut t = PromptTemplates::default();
        let slots: [(&str, &mut String); 6] = [
            ("role_definition.txt", &mut t.role_definition),
            ("task_description.txt", &mut t.task_description),
            ("decision_constraints.txt", &mut t.decision_constraints),
            ("fairness_prefix.txt", &mut t.fairness_prefix),
            ("system2_steps.txt", &mut t.system2_steps),
            ("case_information.txt", &mut t.case_information),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(t)
    }
}

/// Fixed-precision rendering: labs with two decimals, everything else with one.
pub fn format_value(feature: Feature, value: f64) -> String {
    if feature == Feature::Age {
        format!("{value:.0}")
    } else if feature.is_lab() {
        format!("{value:.2}")
    } else {
        format!("{value:.1}")
    }
}

fn measurement_lines<F: Fn(Feature) -> f64>(get: F) -> String {
    Feature::CLINICAL
        .iter()
        .map(|&f| format!("- {}: {}", f.label(), format_value(f, get(f))))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub kind: StrategyKind,
    /// Requested cap but no analog qualified; the text equals the system2 prompt.
    pub fallback: bool,
    pub role_definition: String,
    pub task_description: String,
    pub decision_constraints: String,
    pub case_information: String,
    pub text: String,
}

fn case_information(templates: &PromptTemplates, analog: &RetrievalResult) -> Result<String> {
    let raw = analog.case.raw_vector()?;
    let lines = measurement_lines(|f| {
        let i = Feature::CLINICAL
            .iter()
            .position(|c| *c == f)
            .expect("clinical feature");
        raw[i]
    });
    let outcome = if analog.case.true_outcome {
        "died in hospital"
    } else {
        "survived to discharge"
    };
    Ok(templates
        .case_information
        .replace("{case_measurements}", &lines)
        .replace("{actual_outcome}", outcome)
        .replace("{bias_label}", analog.case.bias_type.human())
        .replace("{bias_type}", analog.case.bias_type.as_str())
        .trim_end()
        .to_string())
}

pub fn build_prompt(patient: &PatientRecord, kind: StrategyKind, analog: Option<&RetrievalResult>) -> Result<Prompt> {
    build_prompt_with(&PromptTemplates::default(), patient, kind, analog)
}

pub fn build_prompt_with(
    templates: &PromptTemplates,
    patient: &PatientRecord,
    kind: StrategyKind,
    analog: Option<&RetrievalResult>,
) -> Result<Prompt> {
    let role = templates.role_definition.trim_end().to_string();
    let task = templates
        .task_description
        .replace("{age}", &patient.age.to_string())
        .replace("{sex}", patient.sex.as_str())
        .replace("{race}", patient.race.as_str())
        .replace("{measurements}", &measurement_lines(|f| patient.get(f)))
        .trim_end()
        .to_string();
    let mut constraints = String::new();
    if kind.has_fairness() {
        constraints.push_str(templates.fairness_prefix.trim_end());
        constraints.push('\n');
    }
    if kind.has_steps() {
        constraints.push_str(templates.system2_steps.trim_end());
        constraints.push('\n');
    }
    constraints.push_str(templates.decision_constraints.trim_end());

    let (case_info, fallback) = match (kind, analog) {
        (StrategyKind::Cap, Some(a)) => (case_information(templates, a)?, false),
        (StrategyKind::Cap, None) => (String::new(), true),
        _ => (String::new(), false),
    };
    let bodies = [&role, &task, &constraints, &case_info];
    let mut text = String::new();
    for (header, body) in SECTION_HEADERS.iter().zip(bodies) {
        text.push_str(header);
        text.push('\n');
        text.push_str(if body.is_empty() { NO_CASE } else { body });
        text.push_str("\n\n");
    }
    text.truncate(text.trim_end().len());
    text.push('\n');
    Ok(Prompt {
        kind,
        fallback,
        role_definition: role,
        task_description: task,
        decision_constraints: constraints,
        case_information: case_info,
        text,
    })
}

/// A parsed prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mortality_probability: f64,
    pub confidence: f64,
    pub key_factors: [String; 3],
    pub reasoning: String,
    pub strategy: StrategyKind,
    /// Cap was requested but ran as system2 for lack of an analog.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default)]
    pub analog_id: Option<String>,
    /// A value had to be clamped into [0, 1].
    #[serde(default)]
    pub clamped: bool,
    pub parse_attempts: u32,
}

#[derive(Deserialize)]
struct WirePrediction {
    mortality_probability: f64,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    key_factors: Vec<String>,
    #[serde(default)]
    reasoning: String,
}

/// Contents of the first fenced block, or failing that the first balanced
/// `{...}` span.
pub fn extract_json_block(raw: &str) -> Option<String> {
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let Some(end) = after[body_start..].find("```") else {
            break;
        };
        let body = after[body_start..body_start + end].trim();
        if body.starts_with('{') {
            return Some(body.to_string());
        }
        rest = &after[body_start + end + 3..];
    }
    let open = raw.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in raw[open..].char_indices() {
        if in_str {
            match c {
                '\\' if !escaped => escaped = true,
                '"' if !escaped => in_str = false,
                _ => escaped = false,
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(raw[open..=open + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

fn clamp_unit(x: f64, clamped: &mut bool) -> f64 {
    if x.is_nan() {
        *clamped = true;
        return 0.5;
    }
    let c = x.clamp(0.0, 1.0);
    if c != x {
        *clamped = true;
    }
    c
}

fn three_factors(mut factors: Vec<String>) -> [String; 3] {
    factors.retain(|f| !f.trim().is_empty());
    if factors.len() != 3 {
        warn!("response lists {} key factors; keeping three", factors.len());
    }
    factors.resize(3, "unspecified".to_string());
    let mut it = factors.into_iter().map(|f| f.trim().to_string());
    [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
}

fn leading_number(s: &str) -> Option<f64> {
    let s = s.trim().trim_start_matches(['"', '*', ' ']);
    let end = s
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_digit() || *c == '.' || *c == '-' || *c == '+' || *c == 'e' || *c == 'E'))
        .map_or(s.len(), |(i, _)| i);
    let v: f64 = s[..end].parse().ok()?;
    Some(if s[end..].trim_start().starts_with('%') {
        v / 100.0
    } else {
        v
    })
}

fn line_scan(raw: &str) -> Option<(f64, Option<f64>, Vec<String>, String)> {
    let mut prob = None;
    let mut conf = None;
    let mut factors = Vec::new();
    let mut reasoning = String::new();
    for line in raw.lines() {
        let t = line.trim();
        let bullet = t
            .strip_prefix("- ")
            .or_else(|| t.strip_prefix("* "))
            .or_else(|| t.strip_prefix("\u{2022} "));
        let body = bullet.unwrap_or(t);
        if let Some((k, v)) = body.split_once(':') {
            let key = k.trim().trim_matches(['*', '"', '-', ' ']).to_ascii_lowercase();
            if key.ends_with("probability") || key == "mortality risk" {
                if prob.is_none() {
                    prob = leading_number(v);
                }
                continue;
            }
            match key.as_str() {
                "confidence" => {
                    conf = conf.or_else(|| leading_number(v));
                    continue;
                }
                "reasoning" => {
                    reasoning = v.trim().to_string();
                    continue;
                }
                "key factors" | "key_factors" => continue,
                _ => {}
            }
        }
        if bullet.is_some() {
            factors.push(body.trim().to_string());
        }
    }
    prob.map(|p| (p, conf, factors, reasoning))
}

/// Parses a predictor response. The first JSON block that carries a
/// `mortality_probability` wins; otherwise a `probability: <number>` line
/// plus bulleted factors is accepted. Out-of-range values are clamped and
/// flagged.
pub fn parse_response(raw: &str, strategy: StrategyKind) -> Result<PredictionRecord> {
    let parsed = extract_json_block(raw)
        .and_then(|b| serde_json::from_str::<WirePrediction>(&b).ok())
        .map(|w| (w.mortality_probability, w.confidence, w.key_factors, w.reasoning))
        .or_else(|| line_scan(raw));
    let (p, c, factors, reasoning) =
        parsed.ok_or_else(|| Error::Parse("response contains no parsable mortality probability".into()))?;
    let mut clamped = false;
    let mortality_probability = clamp_unit(p, &mut clamped);
    let confidence = clamp_unit(c.unwrap_or(0.5), &mut clamped);
    Ok(PredictionRecord {
        mortality_probability,
        confidence,
        key_factors: three_factors(factors),
        reasoning,
        strategy,
        fallback: false,
        analog_id: None,
        clamped,
        parse_attempts: 1,
    })
}

/// Renders a prediction in the wire format [`parse_response`] reads.
pub fn render_response(record: &PredictionRecord) -> String {
    let body = serde_json::json!({
        "mortality_probability": record.mortality_probability,
        "confidence": record.confidence,
        "key_factors": record.key_factors,
        "reasoning": record.reasoning,
    });
    format!("```json\n{body}\n```\n")
}
