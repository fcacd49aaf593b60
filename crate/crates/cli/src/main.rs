//! `cprobe`: validate probe datasets, collect responses, serve annotation and
//! analyze runs.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime or provider failure.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};

use cprobe_core::pipeline::{
    analyze, auto_annotate, collect_responses, rerender_report, write_report, ReportFormat,
    RunOptions, AUTO_ANNOTATOR_ID,
};
use cprobe_core::probe::{load_dataset_with_warnings, validate_balance, BalancePolicy};
use cprobe_core::store::{sha256_file, RunStore, StoreError};
use cprobe_service::{shutdown_signal, ServiceConfig, ServiceError, Server};

#[derive(Parser)]
#[command(name = "cprobe", version, about = "Cultural value probing of language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a probe dataset against the schema and the balance policy.
    Validate {
        dataset: PathBuf,
        /// Treat warnings and imbalance as errors.
        #[arg(long)]
        strict: bool,
        #[arg(long, value_enum, default_value_t = Policy::EqualDimensions)]
        policy: Policy,
    },
    /// Collect every missing response of the run described by a manifest.
    Run {
        manifest: PathBuf,
        #[arg(long, env = "CPROBE_PARALLELISM")]
        parallelism: Option<usize>,
        /// Never call a provider; cache misses fail.
        #[arg(long, env = "CPROBE_REPLAY_ONLY", value_parser = clap::builder::BoolishValueParser::new())]
        replay_only: bool,
    },
    /// Score every response with the lexicon keyword annotator.
    AutoAnnotate {
        run_dir: PathBuf,
        #[arg(long, default_value = AUTO_ANNOTATOR_ID)]
        annotator_id: String,
    },
    /// Serve the blind annotation API for a run.
    AnnotateServe {
        run_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Browser origin allowed to call the API.
        #[arg(long)]
        cors_origin: Option<String>,
        /// Directory with the built annotation UI.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Compute the report of an annotated run.
    Analyze {
        run_dir: PathBuf,
        /// Skip responses below the annotation minimum instead of failing.
        #[arg(long)]
        allow_partial: bool,
        #[arg(long, value_enum, default_value_t = Format::Both)]
        format: Format,
    },
    /// Re-render report.md from report.json.
    Report { run_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    EqualDimensions,
    CountsOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Md,
    Both,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let code = match &e {
            ServiceError::Store(s) => s.exit_code() as u8,
            ServiceError::EmptyRun | ServiceError::EmptyRoster | ServiceError::InvalidOrigin(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("CPROBE_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate {
            dataset,
            strict,
            policy,
        } => validate(dataset, strict, policy),
        Command::Run {
            manifest,
            parallelism,
            replay_only,
        } => {
            let store = RunStore::from_manifest_file(&manifest)?;
            let outcome = collect_responses(
                &store,
                &RunOptions {
                    parallelism,
                    replay_only,
                    retry: None,
                },
            )?;
            println!(
                "run {}: {} job(s) planned, {} completed, {} response(s) already present, {} provider call(s)",
                store.manifest().run_id,
                outcome.planned,
                outcome.completed,
                outcome.skipped,
                outcome.provider_calls
            );
            if outcome.failures.is_empty() {
                return Ok(());
            }
            for f in &outcome.failures {
                eprintln!(
                    "failed: model {} probe {} language {} sample {}: {}",
                    f.key.model_id, f.key.probe_id, f.key.language, f.key.sample, f.message
                );
            }
            Err(Failure {
                code: 2,
                error: anyhow!(
                    "{} job(s) failed; completed work is kept, rerun to retry",
                    outcome.failures.len()
                ),
            })
        }
        Command::AutoAnnotate {
            run_dir,
            annotator_id,
        } => {
            let store = RunStore::open(run_dir)?;
            let n = auto_annotate(&store, &annotator_id)?;
            println!("{n} annotation(s) written by {annotator_id}");
            Ok(())
        }
        Command::AnnotateServe {
            run_dir,
            bind,
            cors_origin,
            ui_dir,
        } => {
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
                code: 2,
                error: e.into(),
            })?;
            runtime.block_on(async {
                let server = Server::bind(&ServiceConfig {
                    run_dir,
                    bind,
                    cors_origin,
                    ui_dir,
                })
                .await?;
                for (id, token) in &server.tokens {
                    println!("annotator {id} token {token}");
                }
                let addr = server.local_addr().map_err(|e| Failure {
                    code: 2,
                    error: e.into(),
                })?;
                println!("listening on http://{addr}");
                server.run(shutdown_signal()).await?;
                Ok(())
            })
        }
        Command::Analyze {
            run_dir,
            allow_partial,
            format,
        } => {
            let store = RunStore::open(run_dir)?;
            let report = analyze(&store, allow_partial)?;
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Md => ReportFormat::Markdown,
                Format::Both => ReportFormat::Both,
            };
            write_report(&store, &report, format)?;
            for p in &report.dimension_scores {
                println!("{} {}: CDS {:.3}", p.model_id, p.dimension, p.cds);
            }
            Ok(())
        }
        Command::Report { run_dir } => {
            rerender_report(&run_dir)?;
            Ok(())
        }
    }
}

fn validate(path: PathBuf, strict: bool, policy: Policy) -> Result<(), Failure> {
    let (dataset, warnings) = load_dataset_with_warnings(&path).map_err(|e| {
        let code = match e {
            cprobe_core::probe::ProbeError::Io { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            error: e.into(),
        }
    })?;
    let policy = match policy {
        Policy::EqualDimensions => BalancePolicy::EqualDimensions,
        Policy::CountsOnly => BalancePolicy::CountsOnly,
    };
    let balance = validate_balance(&dataset, policy);
    println!("{} v{}: {} probe(s)", dataset.name, dataset.version, dataset.probes.len());
    println!("sha256 {}", sha256_file(&path)?);
    println!("{balance}");
    for w in &warnings {
        eprintln!("warning: probe {}: {}", w.probe_id, w.message);
    }
    if strict && !warnings.is_empty() {
        return Err(invalid(anyhow!("{} warning(s) in strict mode", warnings.len())));
    }
    if strict && !balance.balanced {
        return Err(invalid(anyhow!("dataset is not balanced")));
    }
    Ok(())
}
