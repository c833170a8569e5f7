use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use faircap::baseline::{fit, FitConfig, LinearModel};
use faircap::caselib::Repository;
use faircap::cohort::{balance_test, ingest_csv, split, synth_cohort, write_cohort_csv, BiasInjection, PatientRecord};
use faircap::pipeline::{
    baseline_rows, build_cases, evaluate, group_by_method, hex_digest, predict_cohort, read_predictions, write_rows,
    BiasReport, PredictorKind, Provenance, RunConfig,
};
use faircap::prompting::StrategyKind;
use faircap::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "faircap",
    version,
    about = "Bias audit and case prompting for ICU mortality prediction"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct PredictorFlags {
    /// Use the analytic mock predictor.
    #[arg(long, conflicts_with = "endpoint")]
    mock: bool,
    /// Use the configured chat-completion endpoint.
    #[arg(long)]
    endpoint: bool,
    /// Mock logit offsets, e.g. `male=0.5,black=0.5`.
    #[arg(long)]
    bias: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Outcome logit offsets, e.g. `male=0.5`.
        #[arg(long)]
        bias: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a cohort CSV and write the accepted rows.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Fill missing numeric values with column means.
        #[arg(long)]
        impute: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a cohort into train and test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Fit the logistic baseline.
    TrainBaseline {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
    },
    /// Predict a cohort with one prompting strategy or the baseline model.
    Predict {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Case repository for the cap strategy.
        #[arg(long)]
        repository: Option<PathBuf>,
        /// Score with a trained baseline model instead of a prompt strategy.
        #[arg(long, conflicts_with_all = ["strategy", "repository"])]
        model: Option<PathBuf>,
        #[command(flatten)]
        predictor: PredictorFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine, judge and select bias-annotated training errors.
    BuildCases {
        #[arg(long)]
        train: PathBuf,
        /// Prediction file for the training cohort.
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        predictor: PredictorFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the bias report from prediction files.
    Evaluate {
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a saved report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Base,
    Fairness,
    System2,
    Cap,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> StrategyKind {
        match s {
            StrategyArg::Base => StrategyKind::Base,
            StrategyArg::Fairness => StrategyKind::Fairness,
            StrategyArg::System2 => StrategyKind::System2,
            StrategyArg::Cap => StrategyKind::Cap,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    Ok(cfg)
}

fn apply_predictor(cfg: &mut RunConfig, flags: &PredictorFlags) -> Result<()> {
    if flags.mock {
        cfg.predictor.kind = PredictorKind::Mock;
    }
    if flags.endpoint {
        cfg.predictor.kind = PredictorKind::Endpoint;
    }
    if let Some(b) = &flags.bias {
        cfg.predictor.mock.offsets = b.parse()?;
    }
    Ok(())
}

/// Chooses the explicit path or a default inside the run directory.
fn output(cfg: &RunConfig, explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => cfg.run_dir().join(default_name),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(path)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Provenance sidecar next to artifacts whose format has no room for it.
fn write_meta(path: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "command": command,
        "threshold": cfg.threshold,
    });
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    write_file(Path::new(&name), &format!("{meta:#}\n"))
}

fn read_cohort(path: &Path) -> Result<Vec<PatientRecord>> {
    let report = ingest_csv(path, false)?;
    if !report.rejected.is_empty() {
        warn!("{}: {} rows rejected", path.display(), report.rejected.len());
    }
    Ok(report.records)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes)[..16].to_string())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { n, ref bias, ref out } => {
            let bias: Option<BiasInjection> = bias.as_deref().map(str::parse).transpose()?;
            let cohort = synth_cohort(n, cfg.seed, bias.as_ref())?;
            let path = output(&cfg, out, "cohort.csv")?;
            write_file(&path, &write_cohort_csv(&cohort))?;
            write_meta(&path, &cfg, "synth")?;
            let deaths = cohort.iter().filter(|p| p.died_in_hospital).count();
            println!("{}: {} patients, {} deaths", path.display(), cohort.len(), deaths);
        }
        Command::Ingest {
            ref input,
            impute,
            ref out,
        } => {
            let report = ingest_csv(input, impute)?;
            for r in &report.rejected {
                eprintln!("row {}: {}", r.row, r.reason);
            }
            if report.records.is_empty() {
                return Err(Error::invalid(format!("{}: no valid rows", input.display())));
            }
            let path = output(&cfg, out, "cohort.csv")?;
            write_file(&path, &write_cohort_csv(&report.records))?;
            write_meta(&path, &cfg, "ingest")?;
            println!(
                "{}: {} accepted, {} rejected",
                path.display(),
                report.records.len(),
                report.rejected.len()
            );
        }
        Command::Split {
            ref input,
            ratio,
            ref train,
            ref test,
        } => {
            if let Some(r) = ratio {
                cfg.split_ratio = r;
            }
            cfg.validate()?;
            let cohort = read_cohort(input)?;
            let parts = split(&cohort, cfg.split_ratio, cfg.seed)?;
            let train_path = output(&cfg, train, "train.csv")?;
            let test_path = output(&cfg, test, "test.csv")?;
            write_file(&train_path, &write_cohort_csv(&parts.train))?;
            write_file(&test_path, &write_cohort_csv(&parts.test))?;
            write_meta(&train_path, &cfg, "split")?;
            write_meta(&test_path, &cfg, "split")?;
            println!("train {} / test {}", parts.train.len(), parts.test.len());
            for feature in ["age", "sex", "race", "sofa_24h", "apache_iii", "died_in_hospital"] {
                match balance_test(&parts, feature) {
                    Ok(b) => println!(
                        "  {feature:<18} {:?} statistic {:.3} p {:.3}",
                        b.kind, b.statistic, b.p_value
                    ),
                    Err(e) => println!("  {feature:<18} {e}"),
                }
            }
        }
        Command::TrainBaseline {
            ref train,
            ref out,
            epochs,
            lr,
            l2,
        } => {
            let cohort = read_cohort(train)?;
            let mut fc = FitConfig {
                seed: cfg.seed,
                ..FitConfig::default()
            };
            if let Some(e) = epochs {
                fc.epochs = e;
            }
            if let Some(v) = lr {
                fc.learning_rate = v;
            }
            if let Some(v) = l2 {
                fc.l2 = v;
            }
            let model = fit(&cohort, &fc)?;
            let path = output(&cfg, out, "baseline.toml")?;
            model.save(&path)?;
            write_meta(&path, &cfg, "train-baseline")?;
            println!(
                "{}: final loss {:.5}",
                path.display(),
                model.loss_history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Predict {
            ref cohort,
            strategy,
            ref repository,
            ref model,
            ref predictor,
            ref out,
        } => {
            if let Some(s) = strategy {
                cfg.strategy = s.into();
            }
            apply_predictor(&mut cfg, predictor)?;
            cfg.validate()?;
            let patients = read_cohort(cohort)?;
            if let Some(model_path) = model {
                let m = LinearModel::load(model_path)?;
                let prov = Provenance {
                    seed: cfg.seed,
                    config_hash: cfg.hash(),
                };
                let path = output(&cfg, out, "predictions-baseline.jsonl")?;
                write_rows(&path, &baseline_rows(&patients, &m, &prov)?)?;
                println!("{}: {} rows", path.display(), patients.len());
                return Ok(());
            }
            let repo = match repository {
                Some(p) => Some(Repository::load(p)?),
                None if cfg.strategy == StrategyKind::Cap => {
                    warn!("cap without a repository falls back to the system2 prompt");
                    None
                }
                None => None,
            };
            let p = cfg.predictor()?;
            let path = output(&cfg, out, &format!("predictions-{}.jsonl", cfg.strategy))?;
            let summary = predict_cohort(&patients, cfg.strategy, p.as_ref(), repo.as_ref(), &cfg, &path)?;
            println!(
                "{}: {} written, {} resumed, {} failed, {} fallbacks",
                path.display(),
                summary.written,
                summary.skipped,
                summary.failed,
                summary.fallbacks
            );
        }
        Command::BuildCases {
            ref train,
            ref predictions,
            ref predictor,
            ref out,
        } => {
            apply_predictor(&mut cfg, predictor)?;
            cfg.validate()?;
            let patients = read_cohort(train)?;
            let rows = read_predictions(predictions)?;
            let p = cfg.predictor()?;
            let judge = cfg.judge()?;
            let repo = build_cases(&patients, &rows, p.as_ref(), judge.as_ref(), &cfg)?;
            let path = output(&cfg, out, "repository.jsonl")?;
            repo.save(&path)?;
            write_meta(&path, &cfg, "build-cases")?;
            let biased = repo.cases.iter().filter(|c| c.bias_type.attribute().is_some()).count();
            println!(
                "{}: {} cases ({} bias-typed) from {} mined errors",
                path.display(),
                repo.cases.len(),
                biased,
                repo.header.mined_errors
            );
            for (t, n) in repo.bias_counts() {
                println!("  {:<28} {n}", t.human());
            }
        }
        Command::Evaluate {
            ref predictions,
            ref out,
        } => {
            cfg.validate()?;
            let mut rows = Vec::new();
            let mut inputs = Vec::new();
            for p in predictions {
                rows.extend(read_predictions(p)?);
                inputs.push((p.display().to_string(), file_digest(p)?));
            }
            let report = evaluate(&group_by_method(rows), &cfg, inputs)?;
            let path = output(&cfg, out, "report.json")?;
            write_file(&path, &report.to_json()?)?;
            info!("wrote {}", path.display());
            print!("{}", report.to_text());
        }
        Command::Report { ref input, format } => {
            let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
            let report = BiasReport::from_json(&text)?;
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Json => println!("{}", report.to_json()?),
                Format::Csv => print!("{}", report.subgroups_csv()),
            }
        }
    }
    Ok(())
}
