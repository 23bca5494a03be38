use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tunegram_cli::commands::{
    cmd_analyze, cmd_detect_chords, cmd_extract, cmd_generate, cmd_identify_melody, cmd_reharmonize, cmd_train,
    DetectArgs, ExtractArgs, FileArgs, GenerateArgs, ReharmonizeArgs, TrainArgs,
};
use tunegram_cli::{CliError, PipelineConfig, EXIT_OK, EXIT_USAGE};

/// Melody analysis, chord grammars and a conditional VAE for melody generation.
#[derive(Debug, Parser)]
#[command(name = "tunegram", version)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Melody track, key and chords of one MIDI file.
    Analyze(FileArgs),
    /// Score every track and pick the melody.
    IdentifyMelody(FileArgs),
    /// Label chords per bin.
    DetectChords(DetectArgs),
    /// Cut a corpus into encoded training segments (JSONL).
    Extract(ExtractArgs),
    /// Train the autoencoder on a dataset.
    Train(TrainArgs),
    /// Expand a chord grammar and generate a melody over it.
    Generate(GenerateArgs),
    /// Decode a song's melody under new chords or a new mode.
    Reharmonize(ReharmonizeArgs),
}

fn run(cli: &Cli) -> Result<tunegram_cli::commands::Report, CliError> {
    let cfg = PipelineConfig::load_or_default(cli.config.as_deref())?;
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, &cfg),
        Command::IdentifyMelody(a) => cmd_identify_melody(a, &cfg),
        Command::DetectChords(a) => cmd_detect_chords(a, &cfg),
        Command::Extract(a) => cmd_extract(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Generate(a) => cmd_generate(a, &cfg),
        Command::Reharmonize(a) => cmd_reharmonize(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report.json).expect("report serializes"));
            } else {
                print!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
