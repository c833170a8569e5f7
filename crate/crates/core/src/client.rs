//! Chat-completion transport with retries and bounded concurrency, and the
//! deterministic mock predictor used offline.

use std::time::Duration;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::caselib::BiasType;
use crate::cohort::{BiasInjection, Feature, PatientRecord, SynthConfig};
use crate::error::{Error, Result};
use crate::prompting::{build_prompt_with, parse_response, PredictionRecord, PromptTemplates, StrategyKind};
use crate::retrieval::RetrievalResult;
use crate::util::{bounded_map, sigmoid, stable_hash};

pub const DEFAULT_KEY_VAR: &str = "FAIRCAP_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_prompt_chars: usize,
    /// Log request and response bodies at debug level.
    pub debug: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "qwen3-32b".into(),
            api_key_env: DEFAULT_KEY_VAR.into(),
            timeout_secs: 120.0,
            max_retries: 3,
            max_in_flight: 4,
            temperature: 0.0,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            max_prompt_chars: 32_000,
            debug: false,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::config("endpoint timeout must be positive"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be at least 1"));
        }
        if self.base_url.trim().is_empty() {
            return Err(Error::config("endpoint base_url is empty"));
        }
        Ok(())
    }

    /// Resolves the API key; fails before any network traffic.
    pub fn api_key(&self) -> Result<String> {
        match std::env::var(&self.api_key_env) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(Error::config(format!(
                "API key variable `{}` is not set",
                self.api_key_env
            ))),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, retry: u32) -> Duration {
        let exp = self
            .backoff_base_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.backoff_max_ms);
        let jitter = if exp > 1 {
            rand::rng().random_range(0..=exp / 2)
        } else {
            0
        };
        Duration::from_millis(exp + jitter)
    }
}

/// Request body for one prompt; byte-stable for a fixed prompt and config.
pub fn request_body(prompt: &str, endpoint: &EndpointConfig) -> String {
    serde_json::json!({
        "model": endpoint.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
        "stream": false,
    })
    .to_string()
}

/// Message text of a chat-completion envelope, or the body itself when it is
/// not one.
pub fn response_text(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.pointer("/choices/0/message/content")?.as_str().map(str::to_string))
        .unwrap_or_else(|| body.to_string())
}

fn agent(endpoint: &EndpointConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into()
}

fn attempt(agent: &ureq::Agent, url: &str, key: &str, body: &str) -> std::result::Result<String, String> {
    let mut resp = agent
        .post(url)
        .header("Authorization", &format!("Bearer {key}"))
        .header("Content-Type", "application/json")
        .send(body)
        .map_err(|e| e.to_string())?;
    let status = resp.status();
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    if status.is_success() {
        Ok(text)
    } else {
        let snippet: String = text.chars().take(200).collect();
        Err(format!("HTTP {}: {snippet}", status.as_u16()))
    }
}

/// Sends one prompt, retrying transport failures and non-success statuses
/// with exponential backoff and jitter. Returns the response text and the
/// number of attempts made.
pub fn complete_with_retries(prompt: &str, endpoint: &EndpointConfig) -> Result<(String, u32)> {
    endpoint.validate()?;
    let key = endpoint.api_key()?;
    if prompt.chars().count() > endpoint.max_prompt_chars {
        return Err(Error::invalid(format!(
            "prompt of {} characters exceeds max_prompt_chars {}",
            prompt.chars().count(),
            endpoint.max_prompt_chars
        )));
    }
    let body = request_body(prompt, endpoint);
    if endpoint.debug {
        debug!("request to {}: {body}", endpoint.url());
    }
    let agent = agent(endpoint);
    let url = endpoint.url();
    let mut log = Vec::new();
    for n in 0..=endpoint.max_retries {
        if n > 0 {
            std::thread::sleep(endpoint.backoff(n - 1));
        }
        match attempt(&agent, &url, &key, &body) {
            Ok(text) => {
                if endpoint.debug {
                    debug!("response: {text}");
                }
                return Ok((response_text(&text), n + 1));
            }
            Err(e) => {
                warn!("attempt {} to {url} failed: {e}", n + 1);
                log.push(format!("attempt {}: {e}", n + 1));
            }
        }
    }
    Err(Error::Transport {
        attempts: endpoint.max_retries + 1,
        message: log.join("; "),
    })
}

pub fn complete(prompt: &str, endpoint: &EndpointConfig) -> Result<String> {
    complete_with_retries(prompt, endpoint).map(|(text, _)| text)
}

/// Sends many prompts with at most `max_in_flight` outstanding; results come
/// back in input order.
pub fn complete_batch(prompts: &[String], endpoint: &EndpointConfig) -> Result<Vec<Result<(String, u32)>>> {
    endpoint.validate()?;
    endpoint.api_key()?;
    Ok(bounded_map(prompts, endpoint.max_in_flight, |_, p| {
        complete_with_retries(p, endpoint)
    }))
}

/// Anything that turns a patient and strategy into a prediction.
pub trait Predictor: Sync {
    fn predict(
        &self,
        patient: &PatientRecord,
        kind: StrategyKind,
        analog: Option<&RetrievalResult>,
    ) -> Result<PredictionRecord>;
}

/// Predictor that prompts a chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct EndpointPredictor {
    pub endpoint: EndpointConfig,
    pub templates: PromptTemplates,
    /// Re-prompts allowed after an unparsable response.
    pub parse_retries: u32,
}

impl Predictor for EndpointPredictor {
    fn predict(
        &self,
        patient: &PatientRecord,
        kind: StrategyKind,
        analog: Option<&RetrievalResult>,
    ) -> Result<PredictionRecord> {
        let prompt = build_prompt_with(&self.templates, patient, kind, analog)?;
        let mut attempts = 0;
        let mut last = None;
        for _ in 0..=self.parse_retries {
            let (text, n) = complete_with_retries(&prompt.text, &self.endpoint)?;
            attempts += n;
            match parse_response(&text, kind) {
                Ok(mut rec) => {
                    rec.parse_attempts = attempts;
                    rec.fallback = prompt.fallback;
                    rec.analog_id = analog.filter(|_| kind == StrategyKind::Cap).map(|a| a.case.id.clone());
                    return Ok(rec);
                }
                Err(e) => {
                    warn!("unparsable response for {}: {e}", patient.id);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Parse("no response".into())))
    }
}

/// Analytic stand-in for a biased language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSpec {
    pub intercept: f64,
    /// Weights on features standardized with the reference cohort statistics.
    pub weights: Vec<(Feature, f64)>,
    pub offsets: BiasInjection,
    /// A cap analog with a bias type removes the offsets on that attribute.
    pub cap_correction: bool,
    /// Logit noise, keyed on the clinical values only.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for MockSpec {
    fn default() -> Self {
        MockSpec {
            intercept: -2.2,
            weights: vec![
                (Feature::Sofa24h, 0.9),
                (Feature::ApacheIii, 0.7),
                (Feature::LactateMax, 0.6),
                (Feature::Charlson, 0.3),
                (Feature::Gcs, -0.3),
            ],
            offsets: BiasInjection::default(),
            cap_correction: true,
            noise_sd: 0.3,
            seed: 7,
        }
    }
}

fn clinical_noise(patient: &PatientRecord, spec: &MockSpec) -> f64 {
    if spec.noise_sd == 0.0 {
        return 0.0;
    }
    let key: String = patient
        .clinical_vector()
        .iter()
        .map(|v| format!("{:x};", v.to_bits()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(spec.seed, &key));
    let z: f64 = rng.sample(StandardNormal);
    spec.noise_sd * z
}

/// Offsets still active after any cap correction.
pub fn active_offset(
    patient: &PatientRecord,
    kind: StrategyKind,
    analog: Option<&RetrievalResult>,
    spec: &MockSpec,
) -> f64 {
    let key = patient.subgroup();
    let corrected = match (kind, analog) {
        (StrategyKind::Cap, Some(a)) if spec.cap_correction && a.case.bias_type != BiasType::None => {
            a.case.bias_type.attribute()
        }
        _ => None,
    };
    spec.offsets
        .offsets
        .iter()
        .filter(|(v, _)| v.matches(&key) && Some(v.attribute()) != corrected)
        .map(|(_, o)| o)
        .sum()
}

pub fn mock_predict(
    patient: &PatientRecord,
    kind: StrategyKind,
    analog: Option<&RetrievalResult>,
    spec: &MockSpec,
) -> PredictionRecord {
    let reference = SynthConfig::default();
    let mut contributions: Vec<(Feature, f64)> = spec
        .weights
        .iter()
        .map(|&(f, w)| {
            let (mean, sd) = reference.reference(f);
            (f, w * (patient.get(f) - mean) / sd)
        })
        .collect();
    let severity: f64 = contributions.iter().map(|(_, c)| c).sum();
    let offset = active_offset(patient, kind, analog, spec);
    let p = sigmoid(spec.intercept + severity + offset + clinical_noise(patient, spec));

    contributions.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.name().cmp(b.0.name())));
    let mut names: Vec<String> = contributions
        .iter()
        .take(3)
        .map(|(f, _)| f.label().to_string())
        .collect();
    for f in Feature::CLINICAL {
        if names.len() == 3 {
            break;
        }
        if !names.iter().any(|n| n == f.label()) {
            names.push(f.label().to_string());
        }
    }
    let factors = [names[0].clone(), names[1].clone(), names[2].clone()];

    let cap_analog = analog.filter(|_| kind == StrategyKind::Cap);
    let mut reasoning = format!(
        "Risk is driven mainly by {}, {} and {}; overall estimate {:.3}.",
        factors[0], factors[1], factors[2], p
    );
    if let Some(a) = cap_analog {
        reasoning.push_str(&format!(
            " A reference case labeled {} was reviewed.",
            a.case.bias_type.human()
        ));
    }
    PredictionRecord {
        mortality_probability: p,
        confidence: 0.5 + (p - 0.5).abs(),
        key_factors: factors,
        reasoning,
        strategy: kind,
        fallback: kind == StrategyKind::Cap && analog.is_none(),
        analog_id: cap_analog.map(|a| a.case.id.clone()),
        clamped: false,
        parse_attempts: 1,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockPredictor {
    pub spec: MockSpec,
}

impl Predictor for MockPredictor {
    fn predict(
        &self,
        patient: &PatientRecord,
        kind: StrategyKind,
        analog: Option<&RetrievalResult>,
    ) -> Result<PredictionRecord> {
        Ok(mock_predict(patient, kind, analog, &self.spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caselib::{CaseRecord, ErrorType};
    use crate::cohort::{synth_cohort, Sex};

    fn twins() -> (PatientRecord, PatientRecord) {
        let mut m = synth_cohort(1, 5, None).unwrap().remove(0);
        m.sex = Sex::Male;
        let mut f = m.clone();
        f.sex = Sex::Female;
        (m, f)
    }

    fn analog(bias: BiasType) -> RetrievalResult {
        let p = synth_cohort(1, 6, None).unwrap().remove(0);
        RetrievalResult {
            case: CaseRecord {
                id: "C1".into(),
                age: p.age,
                demographics: p.subgroup(),
                clinical: Feature::CLINICAL
                    .iter()
                    .map(|f| (f.name().to_string(), p.get(*f)))
                    .collect(),
                true_outcome: false,
                predicted_probability: 0.7,
                error_type: ErrorType::FalsePositive,
                bias_type: bias,
                judge_rationale: String::new(),
                normalized_vector: vec![0.0; 15],
            },
            similarity: 0.9,
            base_similarity: 0.9,
            demo_matches: 2,
            crossed_features: vec![],
        }
    }

    #[test]
    fn no_offsets_means_no_strategy_effect() {
        let (m, _) = twins();
        let spec = MockSpec::default();
        let a = analog(BiasType::SexBasedAssumption);
        let base = mock_predict(&m, StrategyKind::Base, None, &spec).mortality_probability;
        for kind in StrategyKind::ALL {
            assert_eq!(mock_predict(&m, kind, Some(&a), &spec).mortality_probability, base);
        }
    }

    #[test]
    fn sex_offset_and_cap_cancellation() {
        let (m, f) = twins();
        let spec = MockSpec {
            offsets: "male=0.5".parse().unwrap(),
            ..MockSpec::default()
        };
        let pm = mock_predict(&m, StrategyKind::Base, None, &spec).mortality_probability;
        let pf = mock_predict(&f, StrategyKind::Base, None, &spec).mortality_probability;
        assert!(pm > pf);
        let a = analog(BiasType::SexBasedAssumption);
        let cm = mock_predict(&m, StrategyKind::Cap, Some(&a), &spec).mortality_probability;
        let cf = mock_predict(&f, StrategyKind::Cap, Some(&a), &spec).mortality_probability;
        assert_eq!(cm, cf);
        // a race-typed analog leaves the sex offset alone
        let r = analog(BiasType::RacialOverestimation);
        assert_eq!(
            mock_predict(&m, StrategyKind::Cap, Some(&r), &spec).mortality_probability,
            pm
        );
        // system2 keeps the offset even with an analog in hand
        assert_eq!(
            mock_predict(&m, StrategyKind::System2, Some(&a), &spec).mortality_probability,
            pm
        );
        let off = MockSpec {
            cap_correction: false,
            ..spec
        };
        assert_eq!(
            mock_predict(&m, StrategyKind::Cap, Some(&a), &off).mortality_probability,
            pm
        );
    }

    #[test]
    fn key_factors_are_top_contributions() {
        let (m, _) = twins();
        let r = mock_predict(&m, StrategyKind::Base, None, &MockSpec::default());
        let labels: Vec<&str> = Feature::CLINICAL.iter().map(|f| f.label()).collect();
        assert!(r.key_factors.iter().all(|k| labels.contains(&k.as_str())));
        assert_eq!(r, mock_predict(&m, StrategyKind::Base, None, &MockSpec::default()));
    }

    #[test]
    fn missing_key_fails_fast() {
        let cfg = EndpointConfig {
            api_key_env: "FAIRCAP_TEST_KEY_THAT_IS_NOT_SET".into(),
            base_url: "http://192.0.2.1:9".into(),
            ..EndpointConfig::default()
        };
        assert!(matches!(complete("hi", &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn envelope_unwrapping() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#;
        assert_eq!(response_text(body), "hello");
        assert_eq!(response_text("plain"), "plain");
    }

    #[test]
    fn request_body_is_stable() {
        let cfg = EndpointConfig::default();
        assert_eq!(
            request_body("p", &cfg),
            r#"{"messages":[{"content":"p","role":"user"}],"model":"qwen3-32b","stream":false,"temperature":0.0}"#
        );
    }
}
