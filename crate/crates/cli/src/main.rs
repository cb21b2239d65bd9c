mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use speakerlab::Error;

use config::RunConfig;

/// Frame-wise speaker embeddings and end-to-end diarization on synthetic
/// meetings.
#[derive(Parser, Debug)]
#[command(name = "speakerlab", version)]
struct Cli {
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set teacher.model.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads inside a command.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the roster, held-out trials and train/dev/test meetings.
    Simulate,
    TrainTeacher,
    TrainStudent,
    TrainEend,
    /// Write RTTM hypotheses for a wav or a meeting manifest.
    Diarize(DiarizeArgs),
    /// DER of hypothesis RTTM against reference RTTM.
    Evaluate,
    /// EER and minDCF on a trial list.
    Verify,
    /// Grid search of threshold and smoothing windows on dev meetings.
    Tune,
    /// Print the resolved configuration.
    Config,
}

#[derive(Args, Debug)]
struct DiarizeArgs {
    #[arg(long)]
    blockwise: bool,
    /// Block length in seconds.
    #[arg(long)]
    block_length: Option<f64>,
    /// Block advance in seconds.
    #[arg(long)]
    block_advance: Option<f64>,
    /// Global speaker count for block-wise clustering.
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    wav: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NumericalAbort { .. } => 4,
        _ => 3,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::NumericalAbort { .. } => "numerical_abort",
        Error::Io { .. } => "io",
        Error::Format(_) => "format",
        Error::Shape { .. } => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Data(_) => "data",
    }
}

fn run(cli: Cli) -> speakerlab::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(j) = cli.jobs {
        overrides.push(format!("jobs={j}"));
    }
    if let Command::Diarize(a) = &cli.command {
        if a.blockwise {
            overrides.push("diarize.blockwise=true".into());
        }
        if let Some(v) = a.block_length {
            overrides.push(format!("diarize.block.block_s={v:?}"));
        }
        if let Some(v) = a.block_advance {
            overrides.push(format!("diarize.block.advance_s={v:?}"));
        }
        if let Some(v) = a.speakers {
            overrides.push(format!("diarize.block.speakers={v}"));
        }
        if let Some(w) = &a.wav {
            overrides.push(format!("diarize.wav={:?}", w.display().to_string()));
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if cfg.jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::TrainTeacher => commands::train_teacher(&cfg),
        Command::TrainStudent => commands::train_student(&cfg),
        Command::TrainEend => commands::train_eend(&cfg),
        Command::Diarize(_) => commands::diarize(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Verify => commands::verify(&cfg),
        Command::Tune => commands::tune(&cfg),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
