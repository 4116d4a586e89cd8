mod eval;
mod failure;
mod http;
mod ingest;
mod settings;
mod synth;
mod train;
mod triplets;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::Failure;
use crate::settings::Resolver;

/// Composed image retrieval over frozen embeddings.
#[derive(Parser)]
#[command(name = "scot", version)]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat TOML file supplying values for the chosen command; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert JSONL or TSV embeddings into a SEMB table.
    Ingest(ingest::IngestArgs),
    /// Generate (caption, modification, modified caption) triplets.
    Triplets(triplets::TripletArgs),
    /// Write a synthetic concept-world dataset.
    Synth(synth::SynthArgs),
    /// Train the composition network.
    Train(train::TrainArgs),
    /// Recall@K for the learned query and the baselines.
    Eval(eval::EvalArgs),
    /// Rank the gallery for one reference image and modification.
    Search(eval::SearchArgs),
    /// Image-to-text contrastive loss over id-matched tables.
    Probe(eval::ProbeArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut r = Resolver::load(cli.config.as_deref())?;
    if let Some(n) = r.optional("threads", cli.threads)? {
        if n == 0 {
            return Err(Failure::config("threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Ingest(a) => ingest::run(a, r),
        Command::Triplets(a) => triplets::run(a, r),
        Command::Synth(a) => synth::run(a, r),
        Command::Train(a) => train::run(a, r),
        Command::Eval(a) => eval::run_eval(a, r),
        Command::Search(a) => eval::run_search(a, r),
        Command::Probe(a) => eval::run_probe(a, r),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprint!("{message}");
            Failure::config(first).report();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(f) => {
            f.report();
            ExitCode::from(f.exit_code())
        }
    }
}
