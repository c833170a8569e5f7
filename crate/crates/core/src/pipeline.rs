//! Orchestration: run configuration, prediction files, case building and the
//! three-part bias report.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{LinearModel, BASELINE_LABEL};
use crate::caselib::{build_repository, CaseLibConfig, Repository};
use crate::client::{EndpointConfig, EndpointPredictor, MockPredictor, MockSpec, Predictor};
use crate::cohort::{AgeBand, DemographicValue, PatientRecord, Race, Sex, SubgroupKey, SubgroupPattern};
use crate::error::{Error, Result};
use crate::fairness::{
    fairness_report_lenient, subgroup_table, ComparisonOutcome, DimensionGap, ScoredRecord, SubgroupMetrics,
    COMPARISONS,
};
use crate::judge::{EndpointJudge, Judge, MockJudge};
use crate::metrics::{bootstrap_ci, BootstrapConfig, MetricName, MetricWithCi, ScoredLabel};
use crate::prompting::{build_prompt_with, PredictionRecord, PromptTemplates, StrategyKind};
use crate::reliance::{profile, similarity, FactorVocabulary, RelianceSimilarity};
use crate::retrieval::{retrieve, RetrievalConfig, Standardization};
use crate::util::bounded_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Mock,
    Endpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub mock: MockSpec,
    pub endpoint: EndpointConfig,
    pub parse_retries: u32,
    /// Directory of prompt templates overriding the built-in ones.
    pub templates_dir: Option<PathBuf>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::Mock,
            mock: MockSpec::default(),
            endpoint: EndpointConfig::default(),
            parse_retries: 2,
            templates_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub bootstrap: BootstrapConfig,
    /// Metrics that get a bootstrap interval.
    pub ci_metrics: Vec<MetricName>,
    pub top_k: usize,
    /// Pool reliance factors from correct predictions only.
    pub reliance_correct_only: bool,
    pub alias_file: Option<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            bootstrap: BootstrapConfig::default(),
            ci_metrics: vec![MetricName::Brier],
            top_k: 3,
            reliance_correct_only: false,
            alias_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub threshold: f64,
    pub split_ratio: f64,
    pub strategy: StrategyKind,
    pub out_dir: PathBuf,
    /// Largest tolerated fraction of failed prediction rows.
    pub failure_cap: f64,
    pub predictor: PredictorConfig,
    pub retrieval: RetrievalConfig,
    pub caselib: CaseLibConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            threshold: 0.5,
            split_ratio: 0.7,
            strategy: StrategyKind::Base,
            out_dir: PathBuf::from("runs"),
            failure_cap: 0.01,
            predictor: PredictorConfig::default(),
            retrieval: RetrievalConfig::default(),
            caselib: CaseLibConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config("split_ratio must lie strictly between 0 and 1"));
        }
        if !(0.0..=1.0).contains(&self.failure_cap) {
            return Err(Error::config("failure_cap must lie in [0, 1]"));
        }
        if self.report.top_k == 0 {
            return Err(Error::config("report.top_k must be at least 1"));
        }
        self.retrieval.validate()?;
        if self.predictor.kind == PredictorKind::Endpoint {
            self.predictor.endpoint.validate()?;
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex_digest(text.as_bytes())[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", self.hash()))
    }

    pub fn templates(&self) -> Result<PromptTemplates> {
        match &self.predictor.templates_dir {
            Some(dir) => PromptTemplates::from_dir(dir),
            None => Ok(PromptTemplates::default()),
        }
    }

    pub fn predictor(&self) -> Result<Box<dyn Predictor>> {
        Ok(match self.predictor.kind {
            PredictorKind::Mock => Box::new(MockPredictor {
                spec: self.predictor.mock.clone(),
            }),
            PredictorKind::Endpoint => {
                self.predictor.endpoint.api_key()?;
                Box::new(EndpointPredictor {
                    endpoint: self.predictor.endpoint.clone(),
                    templates: self.templates()?,
                    parse_retries: self.predictor.parse_retries,
                })
            }
        })
    }

    pub fn judge(&self) -> Result<Box<dyn Judge>> {
        Ok(match self.predictor.kind {
            PredictorKind::Mock => Box::new(MockJudge {
                delta: self.caselib.delta,
            }),
            PredictorKind::Endpoint => {
                self.predictor.endpoint.api_key()?;
                Box::new(EndpointJudge {
                    endpoint: self.predictor.endpoint.clone(),
                    parse_retries: self.predictor.parse_retries,
                })
            }
        })
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMeta {
    pub case_id: String,
    pub similarity: f64,
    pub demo_matches: u8,
    pub bias_type: String,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub subgroup: SubgroupKey,
    pub label: bool,
    /// Strategy name, `system2-fallback`, or `baseline`.
    pub method: String,
    pub status: RowStatus,
    pub probability: Option<f64>,
    pub prompt_hash: Option<String>,
    pub prediction: Option<PredictionRecord>,
    pub retrieval: Option<RetrievalMeta>,
    pub error: Option<String>,
    pub seed: u64,
    pub config_hash: String,
}

impl PredictionRow {
    pub fn scored(&self) -> Option<ScoredRecord> {
        Some(ScoredRecord {
            id: self.id.clone(),
            subgroup: self.subgroup,
            label: self.label,
            score: self.probability?,
        })
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}

/// Parses prediction lines; a later row for the same id replaces an earlier one.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>> {
    let mut rows: Vec<PredictionRow> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: PredictionRow =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("prediction line {}: {e}", i + 1)))?;
        match index.get(&row.id) {
            Some(&j) => rows[j] = row,
            None => {
                index.insert(row.id.clone(), rows.len());
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn append_rows(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in rows {
        let mut line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSummary {
    pub written: usize,
    pub skipped: usize,
    pub failed: usize,
    pub fallbacks: usize,
}

/// Predicts one patient, including retrieval for cap. Configuration errors
/// propagate; anything else becomes a failed row.
pub fn predict_one(
    patient: &PatientRecord,
    kind: StrategyKind,
    predictor: &dyn Predictor,
    repository: Option<&Repository>,
    config: &RunConfig,
    templates: &PromptTemplates,
    prov: &Provenance,
) -> Result<PredictionRow> {
    let mut row = PredictionRow {
        id: patient.id.clone(),
        subgroup: patient.subgroup(),
        label: patient.died_in_hospital,
        method: kind.to_string(),
        status: RowStatus::Failed,
        probability: None,
        prompt_hash: None,
        prediction: None,
        retrieval: None,
        error: None,
        seed: prov.seed,
        config_hash: prov.config_hash.clone(),
    };
    let analog = match (kind, repository) {
        (StrategyKind::Cap, Some(repo)) if !repo.cases.is_empty() => match retrieve(patient, repo, &config.retrieval) {
            Ok(a) => a,
            Err(e) => {
                row.error = Some(e.to_string());
                return Ok(row);
            }
        },
        _ => None,
    };
    let result = build_prompt_with(templates, patient, kind, analog.as_ref())
        .and_then(|prompt| predictor.predict(patient, kind, analog.as_ref()).map(|p| (prompt, p)));
    match result {
        Ok((prompt, pred)) => {
            if prompt.fallback {
                row.method = "system2-fallback".into();
            }
            row.prompt_hash = Some(hex_digest(prompt.text.as_bytes())[..16].to_string());
            row.retrieval = analog.map(|a| RetrievalMeta {
                case_id: a.case.id.clone(),
                similarity: a.similarity,
                demo_matches: a.demo_matches,
                bias_type: a.case.bias_type.to_string(),
            });
            row.probability = Some(pred.mortality_probability);
            row.prediction = Some(pred);
            row.status = RowStatus::Ok;
        }
        Err(e @ Error::Config(_)) => return Err(e),
        Err(e) => row.error = Some(e.to_string()),
    }
    Ok(row)
}

/// Predicts a cohort into `out`, skipping ids that already have a successful
/// row there. Rows are appended in input order, one chunk at a time.
pub fn predict_cohort(
    cohort: &[PatientRecord],
    kind: StrategyKind,
    predictor: &dyn Predictor,
    repository: Option<&Repository>,
    config: &RunConfig,
    out: &Path,
) -> Result<PredictSummary> {
    let templates = config.templates()?;
    let prov = Provenance {
        seed: config.seed,
        config_hash: config.hash(),
    };
    let done: HashSet<String> = if out.exists() {
        read_predictions(out)?
            .into_iter()
            .filter(|r| r.status == RowStatus::Ok)
            .map(|r| r.id)
            .collect()
    } else {
        HashSet::new()
    };
    let todo: Vec<&PatientRecord> = cohort.iter().filter(|p| !done.contains(&p.id)).collect();
    let in_flight = match config.predictor.kind {
        PredictorKind::Mock => 1,
        PredictorKind::Endpoint => config.predictor.endpoint.max_in_flight,
    };
    let mut summary = PredictSummary {
        written: 0,
        skipped: cohort.len() - todo.len(),
        failed: 0,
        fallbacks: 0,
    };
    for chunk in todo.chunks((in_flight * 8).max(64)) {
        let rows = bounded_map(chunk, in_flight, |_, p| {
            predict_one(p, kind, predictor, repository, config, &templates, &prov)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        summary.failed += rows.iter().filter(|r| r.status == RowStatus::Failed).count();
        summary.fallbacks += rows.iter().filter(|r| r.method == "system2-fallback").count();
        summary.written += rows.len();
        append_rows(out, &rows)?;
    }
    info!(
        "{}: {} written, {} skipped, {} failed, {} fell back to system2",
        kind, summary.written, summary.skipped, summary.failed, summary.fallbacks
    );
    let total = summary.written.max(1) as f64;
    if summary.failed as f64 / total > config.failure_cap {
        return Err(Error::FailureCap {
            failed: summary.failed,
            total: summary.written,
            cap: config.failure_cap,
        });
    }
    Ok(summary)
}

/// Scores a cohort with the logistic baseline into prediction rows.
pub fn baseline_rows(cohort: &[PatientRecord], model: &LinearModel, prov: &Provenance) -> Result<Vec<PredictionRow>> {
    cohort
        .iter()
        .map(|p| {
            Ok(PredictionRow {
                id: p.id.clone(),
                subgroup: p.subgroup(),
                label: p.died_in_hospital,
                method: "baseline".into(),
                status: RowStatus::Ok,
                probability: Some(model.predict_prob(p)?),
                prompt_hash: None,
                prediction: None,
                retrieval: None,
                error: None,
                seed: prov.seed,
                config_hash: prov.config_hash.clone(),
            })
        })
        .collect()
}

pub fn write_rows(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    append_rows(path, rows)
}

/// Builds the case repository from training predictions.
pub fn build_cases(
    train: &[PatientRecord],
    train_rows: &[PredictionRow],
    predictor: &dyn Predictor,
    judge: &dyn Judge,
    config: &RunConfig,
) -> Result<Repository> {
    let by_id: BTreeMap<&str, f64> = train_rows
        .iter()
        .filter_map(|r| r.probability.map(|p| (r.id.as_str(), p)))
        .collect();
    let scored: Vec<(PatientRecord, f64)> = train
        .iter()
        .filter_map(|p| by_id.get(p.id.as_str()).map(|s| (p.clone(), *s)))
        .collect();
    if scored.is_empty() {
        return Err(Error::invalid("no training predictions match the training cohort ids"));
    }
    let std = Standardization::fit(train, &config.retrieval)?;
    let mut cfg = config.caselib.clone();
    cfg.seed = config.seed;
    build_repository(&scored, config.threshold, predictor, judge, &std, &cfg)
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub method: String,
    pub n: usize,
    pub failed: usize,
    pub metrics: BTreeMap<MetricName, Option<f64>>,
    pub intervals: BTreeMap<MetricName, MetricWithCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessBlock {
    pub method: String,
    pub comparisons: Vec<ComparisonOutcome>,
    pub max_auroc_gaps: Vec<DimensionGap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelianceRow {
    pub method: String,
    pub group_a: String,
    pub group_b: String,
    pub similarity: Option<RelianceSimilarity>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupPanel {
    pub method: String,
    pub rows: Vec<SubgroupMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
    pub threshold: f64,
    pub bootstrap: BootstrapConfig,
    pub inputs: Vec<(String, String)>,
    /// Unix seconds; the only field allowed to differ between reruns.
    pub generated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub performance: Vec<PerformanceRow>,
    pub fairness: Vec<FairnessBlock>,
    pub reliance: Vec<RelianceRow>,
    pub subgroups: Vec<SubgroupPanel>,
    pub provenance: ReportProvenance,
}

/// Prediction rows grouped by method, in first-seen order.
pub fn group_by_method(rows: Vec<PredictionRow>) -> Vec<(String, Vec<PredictionRow>)> {
    let mut out: Vec<(String, Vec<PredictionRow>)> = Vec::new();
    for r in rows {
        // fallback rows belong to the cap run they came from
        let m = if r.method == "system2-fallback" {
            "cap".to_string()
        } else {
            r.method.clone()
        };
        match out.iter_mut().find(|(k, _)| *k == m) {
            Some((_, v)) => v.push(r),
            None => out.push((m, vec![r])),
        }
    }
    out
}

fn reliance_rows(
    method: &str,
    rows: &[PredictionRow],
    config: &RunConfig,
    vocab: &FactorVocabulary,
) -> Vec<RelianceRow> {
    let items: Vec<(&SubgroupKey, &[String])> = rows
        .iter()
        .filter(|r| {
            !config.report.reliance_correct_only || r.probability.is_some_and(|p| (p >= config.threshold) == r.label)
        })
        .filter_map(|r| r.prediction.as_ref().map(|p| (&r.subgroup, p.key_factors.as_slice())))
        .collect();
    if items.is_empty() {
        return Vec::new();
    }
    COMPARISONS
        .iter()
        .map(|&(a, b)| {
            let pa = profile(items.iter().copied(), SubgroupPattern::of(a), vocab);
            let pb = profile(items.iter().copied(), SubgroupPattern::of(b), vocab);
            let (similarity, note) = match (pa, pb) {
                (Ok(pa), Ok(pb)) => match similarity(&pa, &pb, config.report.top_k) {
                    Ok(s) => (Some(s), None),
                    Err(e) => (None, Some(e.to_string())),
                },
                (Err(e), _) | (_, Err(e)) => (None, Some(format!("insufficient data: {e}"))),
            };
            RelianceRow {
                method: method.to_string(),
                group_a: a.to_string(),
                group_b: b.to_string(),
                similarity,
                note,
            }
        })
        .collect()
}

/// Computes the report from prediction rows alone.
pub fn evaluate(
    groups: &[(String, Vec<PredictionRow>)],
    config: &RunConfig,
    inputs: Vec<(String, String)>,
) -> Result<BiasReport> {
    let mut vocab = FactorVocabulary::default();
    if let Some(path) = &config.report.alias_file {
        vocab.load_aliases(path)?;
    }
    let t = config.threshold;
    let mut performance = Vec::new();
    let mut fairness = Vec::new();
    let mut reliance = Vec::new();
    let mut subgroups = Vec::new();
    let mut seeds = Vec::new();
    let mut hashes = Vec::new();
    for (method, rows) in groups {
        for r in rows {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
            if !hashes.contains(&r.config_hash) {
                hashes.push(r.config_hash.clone());
            }
        }
        let scored: Vec<ScoredRecord> = rows.iter().filter_map(PredictionRow::scored).collect();
        if scored.is_empty() {
            return Err(Error::Degenerate(format!(
                "method `{method}` has no successful predictions"
            )));
        }
        let labels: Vec<ScoredLabel> = scored.iter().map(ScoredRecord::scored_label).collect();
        let mut metrics = BTreeMap::new();
        for m in MetricName::ALL {
            metrics.insert(m, m.evaluate(&labels, t)?);
        }
        let mut intervals = BTreeMap::new();
        for &m in &config.report.ci_metrics {
            match bootstrap_ci(&labels, m, t, &config.report.bootstrap) {
                Ok(ci) => {
                    intervals.insert(m, ci);
                }
                Err(Error::Degenerate(e)) => log::warn!("{method}: no interval for {m}: {e}"),
                Err(e) => return Err(e),
            }
        }
        performance.push(PerformanceRow {
            method: method.clone(),
            n: scored.len(),
            failed: rows.len() - scored.len(),
            metrics,
            intervals,
        });
        let (comparisons, gaps) = fairness_report_lenient(&scored, t)?;
        fairness.push(FairnessBlock {
            method: method.clone(),
            comparisons,
            max_auroc_gaps: gaps,
        });
        reliance.extend(reliance_rows(method, rows, config, &vocab));
        subgroups.push(SubgroupPanel {
            method: method.clone(),
            rows: subgroup_table(&scored, t)?,
        });
    }
    Ok(BiasReport {
        performance,
        fairness,
        reliance,
        subgroups,
        provenance: ReportProvenance {
            seeds,
            config_hashes: hashes,
            threshold: t,
            bootstrap: config.report.bootstrap,
            inputs,
            generated_at: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        },
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

fn display_method(m: &str) -> String {
    if m == "baseline" {
        BASELINE_LABEL.to_string()
    } else {
        m.to_string()
    }
}

impl BiasReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<BiasReport> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }

    pub fn fairness_for(&self, method: &str) -> Option<&FairnessBlock> {
        self.fairness.iter().find(|f| f.method == method)
    }

    /// EOD of the comparison `a` vs `b` for `method`, when computed.
    pub fn eod(&self, method: &str, a: &str, b: &str) -> Option<f64> {
        self.fairness_for(method)?.comparisons.iter().find_map(|c| match c {
            ComparisonOutcome::Computed(c) if c.group_a == a && c.group_b == b => Some(c.eod),
            _ => None,
        })
    }

    pub fn metric(&self, method: &str, m: MetricName) -> Option<f64> {
        self.performance
            .iter()
            .find(|p| p.method == method)?
            .metrics
            .get(&m)
            .copied()
            .flatten()
    }

    /// Plain-text tables laid out like the published performance, fairness
    /// and reliance tables, plus the subgroup AUROC panel.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Performance (threshold {})", self.provenance.threshold);
        let _ = writeln!(
            s,
            "{:<52} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}  Brier 95% CI",
            "Method", "AUROC", "AUPRC", "Acc", "F1", "Prec", "Sen", "Spec", "NPV", "Brier"
        );
        for p in &self.performance {
            let ci = p
                .intervals
                .get(&MetricName::Brier)
                .map_or_else(|| "n/a".to_string(), |c| format!("[{:.3}, {:.3}]", c.lo, c.hi));
            let _ = write!(s, "{:<52}", display_method(&p.method));
            for m in MetricName::ALL {
                let _ = write!(s, " {:>6}", cell(p.metrics.get(&m).copied().flatten()));
            }
            let _ = writeln!(s, "  {ci}");
        }

        let _ = writeln!(
            s,
            "\nFairness: equal opportunity difference (|TPR gap|), FPR pairs, flags at > 0.05"
        );
        let _ = writeln!(
            s,
            "{:<18} {:<16} {:>6} {:>6} {:>6} {:>15} {:>9} {:>5}",
            "Method", "Comparison", "TPR a", "TPR b", "EOD", "FPR (a/b)", "AUROC gap", "Flag"
        );
        for f in &self.fairness {
            for c in &f.comparisons {
                match c {
                    ComparisonOutcome::Computed(c) => {
                        let _ = writeln!(
                            s,
                            "{:<18} {:<16} {:>6.3} {:>6.3} {:>6.3} {:>15} {:>9} {:>5}",
                            f.method,
                            format!("{} vs {}", c.group_a, c.group_b),
                            c.tpr_a,
                            c.tpr_b,
                            c.eod,
                            format!("{}/{}", cell(c.fpr_gap.0), cell(c.fpr_gap.1)),
                            cell(c.auroc_gap),
                            if c.flag_eod { "BIAS" } else { "-" }
                        );
                    }
                    ComparisonOutcome::InsufficientData { group_a, group_b, .. } => {
                        let _ = writeln!(
                            s,
                            "{:<18} {:<16} insufficient data",
                            f.method,
                            format!("{group_a} vs {group_b}")
                        );
                    }
                }
            }
            for g in &f.max_auroc_gaps {
                let _ = writeln!(
                    s,
                    "{:<18} max AUROC gap ({}): {}{}",
                    f.method,
                    g.dimension,
                    cell(g.max_auroc_gap),
                    if g.flag { " BIAS" } else { "" }
                );
            }
        }

        if !self.reliance.is_empty() {
            let _ = writeln!(s, "\nFeature reliance similarity (key factors)");
            let _ = writeln!(
                s,
                "{:<18} {:<16} {:>8} {:>8} {:>8} {:>8}",
                "Method", "Comparison", "Top3 Jac", "All Jac", "Cosine", "JS Div"
            );
            for r in &self.reliance {
                let cmp = format!("{} vs {}", r.group_a, r.group_b);
                match &r.similarity {
                    Some(x) => {
                        let _ = writeln!(
                            s,
                            "{:<18} {:<16} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                            r.method, cmp, x.topk_jaccard, x.all_jaccard, x.cosine, x.js_divergence
                        );
                    }
                    None => {
                        let _ = writeln!(s, "{:<18} {:<16} insufficient data", r.method, cmp);
                    }
                }
            }
        }

        let _ = writeln!(s, "\nSubgroup AUROC");
        for panel in &self.subgroups {
            let _ = writeln!(s, "[{}]", panel.method);
            for r in &panel.rows {
                let _ = writeln!(s, "  {:<24} n={:<6} AUROC {}", r.label, r.n, cell(r.auroc));
            }
        }
        let _ = writeln!(
            s,
            "\nseeds {:?}; config {}",
            self.provenance.seeds,
            self.provenance.config_hashes.join(",")
        );
        s
    }

    /// Subgroup panel as CSV for external plotting.
    pub fn subgroups_csv(&self) -> String {
        let mut s = String::from("method,subgroup,n,positives,auroc,tpr,fpr\n");
        for panel in &self.subgroups {
            for r in &panel.rows {
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    panel.method,
                    r.label,
                    r.n,
                    r.positives,
                    opt(r.auroc),
                    opt(r.tpr),
                    opt(r.fpr)
                );
            }
        }
        s
    }
}

/// Comparison labels in report order.
pub fn comparison_labels() -> Vec<(String, String)> {
    COMPARISONS
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

/// Labels used by the report for the sex and injected race comparisons.
pub const SEX_PAIR: (DemographicValue, DemographicValue) =
    (DemographicValue::Sex(Sex::Male), DemographicValue::Sex(Sex::Female));
pub const AGE_PAIR: (DemographicValue, DemographicValue) = (
    DemographicValue::AgeBand(AgeBand::Adult),
    DemographicValue::AgeBand(AgeBand::Senior),
);
pub const RACE_PAIR: (DemographicValue, DemographicValue) =
    (DemographicValue::Race(Race::White), DemographicValue::Race(Race::Black));

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::synth_cohort;

    #[test]
    fn config_round_trip_and_hash() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = RunConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
        assert!(RunConfig::from_toml("threshold = 2.0").is_err());
        assert!(RunConfig::from_toml("no_such_key = [").is_err());
    }

    #[test]
    fn later_rows_replace_earlier() {
        let cohort = synth_cohort(2, 1, None).unwrap();
        let prov = Provenance {
            seed: 1,
            config_hash: "h".into(),
        };
        let mut rows = baseline_rows(&cohort, &fake_model(), &prov).unwrap();
        let mut again = rows[0].clone();
        again.probability = Some(0.25);
        rows.push(again);
        let text: String = rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        let parsed = parse_predictions(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].probability, Some(0.25));
    }

    fn fake_model() -> LinearModel {
        LinearModel {
            feature_order: vec!["sofa_24h".into()],
            means: vec![4.0],
            sds: vec![2.0],
            weights: vec![1.0],
            bias: -1.0,
            loss_history: vec![],
        }
    }
}
