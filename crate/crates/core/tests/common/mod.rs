//! Loopback chat-completion stub for transport tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use faircap::caselib::{BiasType, CaseRecord, ErrorType};
use faircap::cohort::{AgeBand, Attribute, DemographicValue, Feature, PatientRecord, Race, Sex, SubgroupKey};
use faircap::judge::{CounterfactualEntry, JudgeRequest};
use faircap::retrieval::RetrievalResult;

/// Reply chosen for the n-th request (0-based).
pub type Script = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

pub struct Stub {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    pub max_in_flight: Arc<AtomicUsize>,
}

#[derive(Debug, Clone)]
pub struct Recorded {
    pub authorization: Option<String>,
    pub body: String,
}

impl Stub {
    /// Starts the stub; each request is held for `hold` before replying.
    pub fn start(hold: Duration, script: Arc<Script>) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let counter = Arc::new(AtomicUsize::new(0));
        let (r, m) = (requests.clone(), max_in_flight.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (r, m, f, c, s) = (r.clone(), m.clone(), in_flight.clone(), counter.clone(), script.clone());
                thread::spawn(move || serve(stream, hold, r, m, f, c, s));
            }
        });
        Stub {
            base_url,
            requests,
            max_in_flight,
        }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(
    stream: TcpStream,
    hold: Duration,
    requests: Arc<Mutex<Vec<Recorded>>>,
    max_in_flight: Arc<AtomicUsize>,
    in_flight: Arc<AtomicUsize>,
    counter: Arc<AtomicUsize>,
    script: Arc<Script>,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut length = 0usize;
    let mut authorization = None;
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => length = v.trim().parse().unwrap_or(0),
                "authorization" => authorization = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let body = String::from_utf8_lossy(&body).into_owned();
    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    max_in_flight.fetch_max(now, Ordering::SeqCst);
    let n = counter.fetch_add(1, Ordering::SeqCst);
    requests.lock().unwrap().push(Recorded {
        authorization,
        body: body.clone(),
    });
    thread::sleep(hold);
    let (status, reply) = script(n, &body);
    in_flight.fetch_sub(1, Ordering::SeqCst);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
    let _ = stream.flush();
}

/// Chat-completion envelope around `content`.
pub fn envelope(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

pub fn prediction_json(p: f64) -> String {
    format!(
        "```json\n{{\"mortality_probability\": {p}, \"confidence\": 0.7, \"key_factors\": [\"lactate\", \"sofa\", \"gcs\"], \"reasoning\": \"stub\"}}\n```"
    )
}

/// Fixed patient behind the golden prompt files.
pub fn patient() -> PatientRecord {
    PatientRecord {
        id: "P000042".into(),
        age: 67,
        sex: Sex::Female,
        race: Race::Black,
        gcs: 9.0,
        apache_iii: 54.0,
        sofa_24h: 7.0,
        charlson: 6.0,
        spo2_min: 86.5,
        heart_rate: 104.2,
        resp_rate: 22.1,
        map_mean: 71.3,
        creatinine_max: 2.41,
        lactate_max: 3.85,
        troponin_max: 0.12,
        platelet_min: 142.0,
        bilirubin_max: 1.07,
        wbc_max: 15.6,
        urine_24h: 820.0,
        mech_vent: true,
        code_status: false,
        died_in_hospital: true,
    }
}

pub fn analog() -> RetrievalResult {
    let source = PatientRecord {
        id: "T000117".into(),
        age: 71,
        sex: Sex::Male,
        ..patient()
    };
    let clinical: BTreeMap<String, f64> = Feature::CLINICAL
        .iter()
        .map(|f| (f.name().to_string(), source.get(*f)))
        .collect();
    RetrievalResult {
        case: CaseRecord {
            id: "T000117".into(),
            age: 71,
            demographics: SubgroupKey {
                sex: Sex::Male,
                age_band: AgeBand::Senior,
                race: Race::Black,
            },
            clinical,
            true_outcome: true,
            predicted_probability: 0.31,
            error_type: ErrorType::FalseNegative,
            bias_type: BiasType::SexBasedAssumption,
            judge_rationale: "Flipping sex moved the estimate by 0.14.".into(),
            normalized_vector: vec![0.0; 15],
        },
        similarity: 0.91,
        base_similarity: 0.91,
        demo_matches: 2,
        crossed_features: vec![],
    }
}

pub fn judge_request() -> JudgeRequest {
    JudgeRequest {
        case_summary: "67-year-old female, black; SOFA 7, lactate 3.85.".into(),
        original: patient().subgroup(),
        original_probability: 0.31,
        counterfactuals: vec![
            CounterfactualEntry {
                attribute: Attribute::Sex,
                variant_value: DemographicValue::Sex(Sex::Male),
                probability: 0.45,
                reasoning: "Lactate and SOFA dominate.".into(),
            },
            CounterfactualEntry {
                attribute: Attribute::Race,
                variant_value: DemographicValue::Race(Race::White),
                probability: 0.33,
                reasoning: "Unchanged physiology.".into(),
            },
        ],
        delta_hint: 0.1,
    }
}
