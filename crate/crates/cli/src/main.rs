//! `chainjudge`: build indexes, run the retrieval pipeline and analyse traces.

mod commands;
mod setup;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Outcome;
use setup::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "chainjudge", version, about = "Bridge-conditioned multi-hop retrieval")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Embed a corpus and cache its vectors.
    Index(commands::IndexArgs),
    /// Run the pipeline over a query set and write traces.
    Run(commands::RunArgs),
    /// Score traces and compare them with baselines.
    Eval(commands::EvalArgs),
    /// Grid-search alpha by re-fusing cached traces.
    TuneAlpha(commands::TuneArgs),
    /// Re-judge one trace set under conditions A, B and C.
    Ablate(commands::AblateArgs),
    /// Mechanism experiments over stored traces.
    Mech(commands::MechArgs),
    /// Tune alpha on one dataset and apply it to another.
    BlindEval(commands::BlindArgs),
    /// Write the synthetic parallel-chain world.
    Synth(commands::SynthArgs),
}

/// A fatal error, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, settings or input files (exit 2).
    Config(String),
    /// Anything else that stopped the command (exit 1).
    Runtime(String),
}

impl From<chainjudge_core::Error> for Failure {
    fn from(e: chainjudge_core::Error) -> Self {
        use chainjudge_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_)
            | E::Io { .. }
            | E::Decode { .. }
            | E::SchemaVersion { .. }
            | E::DuplicateId(_)
            | E::UnresolvedGold { .. }
            | E::MissingTraces(_)
            | E::IdMismatch { .. }
            | E::InvalidArgument(_) => Failure::Config(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = &cli.config;
    let result = match &cli.command {
        Command::Index(a) => commands::index(a, cfg),
        Command::Run(a) => commands::run(a, cfg),
        Command::Eval(a) => commands::eval(a),
        Command::TuneAlpha(a) => commands::tune_alpha(a, cfg),
        Command::Ablate(a) => commands::ablate(a, cfg),
        Command::Mech(a) => commands::mech(a, cfg),
        Command::BlindEval(a) => commands::blind_eval(a, cfg),
        Command::Synth(a) => commands::synth(a, cfg),
    };
    match result {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Partial { errored, total }) => {
            eprintln!("chainjudge: {errored} of {total} queries failed; see the trace error fields");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("chainjudge: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("chainjudge: {msg}");
            ExitCode::from(1)
        }
    }
}
