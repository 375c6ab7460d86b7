//! `durastack` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data (unreadable,
//! malformed or out-of-domain input, unusable artifact, bind failure),
//! 4 numerical failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use durastack_core::artifact;
use durastack_core::config::RunConfig;
use durastack_core::fsutil::write_atomic;
use durastack_core::ingest::{describe_cohort, parse_csv, select_cohort, write_csv, Split};
use durastack_core::pipeline::{self, PipelineError};
use durastack_core::report::{emit_report, parse_report_json, report_csv, MetricReport};
use durastack_core::schema::{cluster_of, CaseRecord};
use durastack_core::seed::derive_seed;
use durastack_core::stack::LockedModel;
use durastack_core::synthdata::{generate, GeneratorConfig};
use durastack_serve::{AppState, LoadedModel};

#[derive(Parser)]
#[command(name = "durastack", version, about = "Stacked surgical case-duration models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores)
    #[arg(long, global = true, env = "DURASTACK_THREADS")]
    threads: Option<usize>,
    /// Output directory, or output file for `predict`
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic development/test cohort with ground truth
    Synth,
    /// Parse a case CSV, apply cohort selection and describe the cohort
    Ingest {
        /// Case CSV to ingest
        #[arg(long = "in")]
        input: PathBuf,
        /// Cases from this year on are labelled as test in the descriptive table
        #[arg(long)]
        test_year: Option<i32>,
    },
    /// Impute, tune, stack and lock a model from development data
    Develop {
        /// Development case CSV
        #[arg(long)]
        train: PathBuf,
    },
    /// Evaluate a locked model on a temporal test cohort
    Validate {
        /// Locked model file (model.dsm)
        #[arg(long)]
        model: PathBuf,
        /// Temporal test case CSV
        #[arg(long)]
        test: PathBuf,
    },
    /// Predict durations for a case CSV
    Predict {
        /// Locked model file (model.dsm)
        #[arg(long)]
        model: PathBuf,
        /// Case CSV to predict; recorded outcomes are ignored
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Re-emit a JSON report as its CSV table
    Report {
        /// JSON report written by develop or validate
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Serve a locked model over HTTP
    Serve {
        /// Locked model file (model.dsm)
        #[arg(long)]
        model: PathBuf,
        /// Bind address, overrides the configuration
        #[arg(long)]
        address: Option<String>,
        /// Directory with the calculator UI bundle
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure { code: if e.is_data() { 3 } else { 4 }, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
            RunConfig::from_kv(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    Ok(cfg)
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    write_atomic(path, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serialisable");
    v.push(b'\n');
    v
}

/// Reads a case CSV. Any invalid row fails the command with its line
/// number and field problems.
fn read_cases(path: &Path) -> Result<Vec<CaseRecord>, Failure> {
    let file = File::open(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let (records, errors) = parse_csv(BufReader::new(file)).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    if let Some(first) = errors.first() {
        let detail: Vec<String> = first.errors.iter().map(ToString::to_string).collect();
        return Err(Failure::data(format!(
            "{}: {} invalid rows; line {}: {}",
            path.display(),
            errors.len(),
            first.line,
            detail.join("; ")
        )));
    }
    Ok(records)
}

fn load_model(path: &Path) -> Result<LockedModel, Failure> {
    artifact::load_file(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Outcome {
    let out = out_dir(&cli.common);
    if let Command::Synth = cli.command {
        // the config file of `synth` is a generator configuration
        init_threads(cli.common.threads);
        return synth(&cli.common, &out);
    }
    let cfg = load_config(&cli.common)?;
    init_threads(cfg.threads);
    match cli.command {
        Command::Synth => unreachable!("handled above"),
        Command::Ingest { input, test_year } => ingest(&input, test_year, &out),
        Command::Develop { train } => develop(&train, &cfg, &out),
        Command::Validate { model, test } => validate(&model, &test, &cfg, &out),
        Command::Predict { model, input } => predict(&model, &input, &cfg, cli.common.out.as_deref()),
        Command::Report { input } => report(&input, &out),
        Command::Serve { model, address, static_dir } => serve(&model, address.unwrap_or(cfg.address.clone()), static_dir.or(cfg.static_dir.clone().map(PathBuf::from))),
    }
}

fn synth(common: &Common, out: &Path) -> Outcome {
    let mut g = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
            GeneratorConfig::from_kv(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
        }
        None => GeneratorConfig::default(),
    };
    if let Some(seed) = common.seed {
        g.seed = seed;
    }
    let data = generate(&g).map_err(|e| Failure::usage(e.to_string()))?;
    data.write_to_dir(out).map_err(|e| Failure::data(e.to_string()))?;
    log::info!("wrote {} development and {} test records to {}", data.development.len(), data.test.len(), out.display());
    Ok(())
}

fn ingest(input: &Path, test_year: Option<i32>, out: &Path) -> Outcome {
    let records = read_cases(input)?;
    let (cohort, exclusions) = select_cohort(records);
    let labels: BTreeMap<String, Split> = cohort
        .iter()
        .map(|r| {
            let test = test_year.is_some_and(|y| cluster_of(r).year >= y);
            (r.case_id.clone(), if test { Split::Test } else { Split::Development })
        })
        .collect();
    let mut csv = Vec::new();
    write_csv(&cohort, &mut csv).map_err(|e| Failure::data(e.to_string()))?;
    write(&out.join("cohort.csv"), &csv)?;
    write(&out.join("exclusions.json"), &to_json(&exclusions))?;
    if !cohort.is_empty() {
        let table = describe_cohort(&cohort, &labels).map_err(|e| Failure::data(e.to_string()))?;
        write(&out.join("descriptive.csv"), table.to_csv().map_err(|e| Failure::data(e.to_string()))?.as_bytes())?;
        write(&out.join("descriptive.json"), &to_json(&table))?;
    }
    for (stage, n) in exclusions.counts() {
        println!("{stage}\t{n}");
    }
    Ok(())
}

fn develop(train: &Path, cfg: &RunConfig, out: &Path) -> Outcome {
    let records = read_cases(train)?;
    let result = pipeline::develop(records, cfg)?;
    artifact::save_file(&result.model, &out.join("model.dsm")).map_err(|e| Failure::data(e.to_string()))?;
    write(&out.join("tune_audit.json"), &to_json(&result.audit))?;
    if let Some(ex) = &result.exclusions {
        write(&out.join("exclusions.json"), &to_json(ex))?;
    }
    emit_report(&result.iecv, Some(&result.iecv_plot), out, derive_seed(cfg.seed, "scatter", 0)).map_err(|e| Failure::data(e.to_string()))?;
    print_summary(&result.iecv);
    Ok(())
}

fn print_summary(report: &MetricReport) {
    let s = &report.summary;
    println!("n\t{}", s.n);
    println!("rmse\t{:.3} [{:.3} - {:.3}]", s.rmse.value, s.rmse.ci_low, s.rmse.ci_high);
    println!("mae\t{:.3} [{:.3} - {:.3}]", s.mae.value, s.mae.ci_low, s.mae.ci_high);
    println!("calibration_intercept\t{:.3} [{:.3} - {:.3}]", s.cal_intercept.value, s.cal_intercept.ci_low, s.cal_intercept.ci_high);
    println!("calibration_slope\t{:.3} [{:.3} - {:.3}]", s.cal_slope.value, s.cal_slope.ci_low, s.cal_slope.ci_high);
    println!("adjusted_r2\t{:.3}", s.adjusted_r2);
}

fn validate(model: &Path, test: &Path, cfg: &RunConfig, out: &Path) -> Outcome {
    let model = load_model(model)?;
    let records = read_cases(test)?;
    let result = pipeline::validate(&model, records, cfg)?;
    emit_report(&result.report, Some(&result.plot), out, derive_seed(cfg.seed, "scatter", 1)).map_err(|e| Failure::data(e.to_string()))?;
    print_summary(&result.report);
    Ok(())
}

fn predict(model: &Path, input: &Path, cfg: &RunConfig, out: Option<&Path>) -> Outcome {
    let model = load_model(model)?;
    let records = read_cases(input)?;
    let rows = pipeline::predict_records(&model, &records, derive_seed(cfg.seed, "predict", 0));
    let mut buf = Vec::new();
    pipeline::write_predictions(&rows, &mut buf).map_err(|e| Failure::data(e.to_string()))?;
    match out {
        Some(path) => write(path, &buf)?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    if failed > 0 {
        log::warn!("{failed} of {} records could not be predicted", rows.len());
    }
    Ok(())
}

fn report(input: &Path, out: &Path) -> Outcome {
    let text = std::fs::read_to_string(input).map_err(|e| Failure::data(format!("{}: {e}", input.display())))?;
    let report = parse_report_json(&text).map_err(|e| Failure::data(e.to_string()))?;
    let csv = report_csv(&report).map_err(|e| Failure::data(e.to_string()))?;
    write(&out.join(format!("{}.csv", report.context.file_stem())), csv.as_bytes())
}

fn serve(model: &Path, address: String, static_dir: Option<PathBuf>) -> Outcome {
    let bytes = std::fs::read(model).map_err(|e| Failure::data(format!("{}: {e}", model.display())))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::data(e.to_string()))?;
    runtime.block_on(async move {
        let listener = durastack_serve::bind(&address).await.map_err(|e| Failure::data(e.to_string()))?;
        let state = AppState::empty();
        let app = durastack_serve::router(state.clone(), static_dir.as_deref());
        let loader = tokio::task::spawn_blocking(move || LoadedModel::from_artifact(&bytes));
        let server = tokio::spawn(durastack_serve::run(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        }));
        match loader.await {
            Ok(Ok(loaded)) => {
                log::info!("model loaded ({} pipelines)", loaded.model.pipelines.len());
                state.install(loaded);
            }
            Ok(Err(e)) => {
                server.abort();
                return Err(Failure::data(format!("{}: {e}", model.display())));
            }
            Err(e) => {
                server.abort();
                return Err(Failure::data(e.to_string()));
            }
        }
        match server.await {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(Failure::data(e.to_string())),
            Err(e) => Err(Failure::data(e.to_string())),
        }
    })
}
