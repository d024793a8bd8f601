use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use selfcrit::config::PipelineConfig;
use selfcrit::dpo;
use selfcrit::pipeline::{run_stage, PipelineError, Stage, DPO_CHECK_FILE};

/// Pipeline toolkit for critique-guided model training: distill a
/// chain-of-thought SFT set from a teacher, sample and judge student answers,
/// assemble preference pairs, verify the preference objective, and score
/// models on the question set.
#[derive(Parser)]
#[command(name = "selfcrit", version, arg_required_else_help = true)]
struct Cli {
    /// Path to the pipeline TOML configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the configured cache directory.
    #[arg(long, global = true, value_name = "DIR")]
    cache: Option<PathBuf>,
    /// Fail judge calls that need a formatting reminder instead of retrying.
    #[arg(long, global = true)]
    strict_judge: bool,
    /// Print the fully resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the chain-of-thought SFT dataset from the teacher endpoint.
    BuildSft,
    /// Sample n candidate answers per question from the student endpoint.
    Generate,
    /// Collect a binary judge verdict for every usable sample.
    Judge,
    /// Partition judged samples and assemble preference pairs.
    MakePairs,
    /// Run the numeric self-checks for the preference objective.
    DpoCheck,
    /// Score model answers against the question set.
    Evaluate,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::BuildSft => Stage::BuildSft,
            Command::Generate => Stage::Generate,
            Command::Judge => Stage::Judge,
            Command::MakePairs => Stage::MakePairs,
            Command::DpoCheck => Stage::DpoCheck,
            Command::Evaluate => Stage::Evaluate,
        }
    }
}

fn fail(err: &PipelineError) -> ExitCode {
    let kind = match err {
        PipelineError::Config(_) => "config",
        PipelineError::MissingStageInput { .. } => "missing-stage-input",
        PipelineError::FailureRateExceeded { .. } => "failure-rate-exceeded",
        PipelineError::Locked { .. } => "locked",
        PipelineError::Stage(_) => "stage",
    };
    let body = serde_json::json!({
        "error": err.to_string(),
        "kind": kind,
        "exit_code": err.exit_code(),
    });
    // One compact line so scripts can take the last stderr line even when
    // log output precedes it.
    eprintln!("{body}");
    ExitCode::from(err.exit_code() as u8)
}

async fn run(cli: Cli) -> ExitCode {
    let stage = cli.command.stage();

    let mut config = match &cli.config {
        Some(path) => match PipelineConfig::load(path) {
            Ok(c) => Some(c),
            Err(e) => return fail(&e.into()),
        },
        None => None,
    };
    if let Some(c) = config.as_mut() {
        if let Some(out) = &cli.out {
            c.output_dir = out.clone();
        }
        if let Some(cache) = &cli.cache {
            c.cache_dir = cache.clone();
        }
    }

    if cli.print_config {
        return match &config {
            Some(c) => {
                print!("{}", c.resolved_toml());
                ExitCode::SUCCESS
            }
            None => fail(&PipelineError::Config("--print-config requires --config".into())),
        };
    }

    match (config, stage) {
        // The objective self-check needs no endpoints, so it runs without a
        // config: report to stdout, exit 0 on pass and 1 on any failed check.
        (None, Stage::DpoCheck) => {
            let report = dpo::verify::run_battery(0);
            let body = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(dir) = &cli.out {
                if let Err(e) = std::fs::create_dir_all(dir).and_then(|()| {
                    selfcrit::util::atomic_write(
                        &dir.join(DPO_CHECK_FILE),
                        format!("{body}\n").as_bytes(),
                    )
                }) {
                    return fail(&e.into());
                }
            }
            println!("{body}");
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        (None, _) => fail(&PipelineError::Config(format!(
            "--config is required for {}",
            stage.name()
        ))),
        (Some(config), _) => match run_stage(&config, stage, cli.strict_judge).await {
            Ok(manifest) => {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&manifest).expect("manifest serializes")
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse()).await
}
