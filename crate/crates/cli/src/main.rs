//! `qlink`: run link scenarios, calibrate baselines, query the technique
//! knowledge base, and explain forensic reports.
//!
//! Exit codes: 0 success, 2 usage, 3 parse failure, 4 validation failure,
//! 5 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qlink_core::harness::{
    calibrate_scenario, run_scenario, ForensicReport, HarnessError, RunOptions, Scenario,
};
use qlink_core::taxonomy::{AttackObjective, IoCClass, KnowledgeBase, QueryFilter, TaxonomyError};

const EXIT_USAGE: u8 = 2;
const EXIT_PARSE: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

#[derive(Parser)]
#[command(
    name = "qlink",
    version,
    about = "Deterministic quantum-link simulator with attack injection and compromise detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and write its forensic report.
    Run(RunArgs),
    /// Run the attack-free calibration for a scenario and store its baseline.
    Calibrate(CalibrateArgs),
    /// Knowledge-base operations.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Report post-processing.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Output directory for reports and baselines (defaults to
    /// $QLINK_OUT_DIR or ./qlink-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = RunFormat::Text)]
    format: RunFormat,
    /// Also write the full structured session log.
    #[arg(long)]
    session_log: bool,
    /// Alternative knowledge base to rank candidates against.
    #[arg(long)]
    kb: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunFormat {
    /// Human-readable rendering.
    Text,
    /// Structured JSON report.
    Struct,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Scenario file (TOML); the attack section is ignored for calibration.
    scenario: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Validate a knowledge-base file and list every violation.
    Validate { kb_file: PathBuf },
    /// Query techniques by objective and/or indicator class.
    Query {
        /// Objective token: environment, source-of-photons,
        /// detectors-of-photons.
        #[arg(long)]
        objective: Option<String>,
        /// Indicator class token, e.g. qber or real-time-photocurrent.
        #[arg(long)]
        ioc_class: Option<String>,
        /// Knowledge base to query (bundled canonical base by default).
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = QueryFormat::Toml)]
        format: QueryFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryFormat {
    Toml,
    Json,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Print the finding-to-technique reasoning chains of a report.
    Explain {
        report_file: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::new(e.exit_code() as u8, e.to_string())
    }
}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        let code = match &e {
            TaxonomyError::Parse(_) => EXIT_PARSE,
            TaxonomyError::Validation(_) => EXIT_VALIDATION,
            TaxonomyError::Io { .. } => EXIT_RUNTIME,
        };
        CliError::new(code, e.to_string())
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Kb { command } => match command {
            KbCommand::Validate { kb_file } => kb_validate(kb_file),
            KbCommand::Query {
                objective,
                ioc_class,
                kb,
                format,
            } => kb_query(objective, ioc_class, kb, format),
        },
        Command::Report { command } => match command {
            ReportCommand::Explain { report_file, kb } => report_explain(report_file, kb),
        },
    }
}

fn options(
    out: Option<PathBuf>,
    kb: Option<PathBuf>,
    session_log: bool,
) -> Result<RunOptions, CliError> {
    let mut opts = RunOptions::default();
    if let Some(dir) = out {
        opts.out_dir = dir;
    }
    opts.write_session_log = session_log;
    if let Some(path) = kb {
        opts.kb = Some(KnowledgeBase::load(path)?);
    }
    Ok(opts)
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let scenario = Scenario::load(&args.scenario)?;
    let opts = options(args.out, args.kb, args.session_log)?;
    let outcome = run_scenario(&scenario, &opts)?;
    match args.format {
        RunFormat::Text => print!("{}", outcome.report.render_text()),
        RunFormat::Struct => print!("{}", outcome.report.to_json()),
    }
    eprintln!(
        "report written to {} (and {})",
        outcome.report_json_path.display(),
        outcome.report_text_path.display()
    );
    if let Some(path) = outcome.session_log_path {
        eprintln!("session log written to {}", path.display());
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let scenario = Scenario::load(&args.scenario)?;
    let opts = options(args.out, None, false)?;
    let (baseline, path) = calibrate_scenario(&scenario, &opts)?;
    println!(
        "baseline {}: click rate {:.6}/slot, afterpulse {}",
        baseline.params_hash,
        baseline.click_rate,
        match &baseline.afterpulse {
            Some(ap) => format!("{:.6} +/- {:.6}", ap.estimate, ap.standard_error),
            None => "inconclusive".to_string(),
        }
    );
    eprintln!("baseline written to {}", path.display());
    Ok(())
}

fn kb_validate(path: PathBuf) -> Result<(), CliError> {
    match KnowledgeBase::load(&path) {
        Ok(kb) => {
            // Loading already validates; re-run to show a clean slate.
            let violations = kb.validate();
            if violations.is_empty() {
                println!(
                    "{}: valid ({} techniques, version {})",
                    path.display(),
                    kb.techniques().len(),
                    kb.version()
                );
                Ok(())
            } else {
                for v in &violations {
                    println!("{v}");
                }
                Err(CliError::new(
                    EXIT_VALIDATION,
                    format!("{} violations", violations.len()),
                ))
            }
        }
        Err(TaxonomyError::Validation(violations)) => {
            for v in &violations {
                println!("{v}");
            }
            Err(CliError::new(
                EXIT_VALIDATION,
                format!("{} violations", violations.len()),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn kb_query(
    objective: Option<String>,
    ioc_class: Option<String>,
    kb_path: Option<PathBuf>,
    format: QueryFormat,
) -> Result<(), CliError> {
    let kb = match kb_path {
        Some(path) => KnowledgeBase::load(path)?,
        None => KnowledgeBase::canonical(),
    };
    let objective = objective
        .map(|token| {
            AttackObjective::parse(&token).ok_or_else(|| {
                CliError::new(
                    EXIT_USAGE,
                    format!(
                        "unknown objective `{token}`; expected one of: {}",
                        AttackObjective::ALL.map(|o| o.token()).join(", ")
                    ),
                )
            })
        })
        .transpose()?;
    let ioc_class = ioc_class
        .map(|token| {
            IoCClass::parse(&token).ok_or_else(|| {
                CliError::new(
                    EXIT_USAGE,
                    format!(
                        "unknown IoC class `{token}`; expected one of: {}",
                        IoCClass::ALL.map(|c| c.token()).join(", ")
                    ),
                )
            })
        })
        .transpose()?;

    let hits = kb.query(QueryFilter {
        objective,
        ioc_class,
    });
    match format {
        QueryFormat::Toml => {
            #[derive(serde::Serialize)]
            struct Export<'a> {
                techniques: Vec<&'a qlink_core::taxonomy::TechniqueRecord>,
            }
            let text = toml::to_string_pretty(&Export { techniques: hits })
                .expect("query result serializes");
            print!("{text}");
        }
        QueryFormat::Json => {
            let text = serde_json::to_string_pretty(&hits).expect("query result serializes");
            println!("{text}");
        }
    }
    Ok(())
}

fn report_explain(path: PathBuf, kb_path: Option<PathBuf>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::new(
            EXIT_RUNTIME,
            format!("cannot read report {}: {e}", path.display()),
        )
    })?;
    let report: ForensicReport = serde_json::from_str(&text).map_err(|e| {
        CliError::new(
            EXIT_PARSE,
            format!("cannot parse report {}: {e}", path.display()),
        )
    })?;
    let kb = match kb_path {
        Some(p) => KnowledgeBase::load(p)?,
        None => KnowledgeBase::canonical(),
    };
    print!("{}", report.explain(&kb));
    Ok(())
}
