use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aclab::harness::{self, ExperimentConfig, RunOverrides};
use aclab::kolmogorov::ObservableSpec;

#[derive(Parser)]
#[command(name = "aclab", version, about = "Stochastic Allen-Cahn laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config or a manifest.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the environment and the config).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// List the built-in observables.
    ListObservables,
    /// Print derived constants for a config (defaults when omitted).
    PrintConstants { config: Option<PathBuf> },
}

fn fail(e: aclab::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(harness::exit_code(&e) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            output_dir,
        } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let ov = RunOverrides {
                seed,
                workers,
                output_dir,
            };
            match harness::run(&cfg, &ov) {
                Ok(out) => {
                    println!("{}", out.output_dir.display());
                    for f in &out.files {
                        println!("  {f}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Validate { config } => match ExperimentConfig::load(&config).and_then(|c| c.validate().map(|_| ())) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::ListObservables => {
            for (name, desc) in ObservableSpec::library() {
                println!("{name:<14} {desc}");
            }
            ExitCode::SUCCESS
        }
        Command::PrintConstants { config } => {
            let cfg = match config.as_deref().map(ExperimentConfig::load).transpose() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match harness::print_constants(cfg.as_ref()) {
                Ok(d) => {
                    println!("{}", serde_json::to_string_pretty(&d).expect("plain numbers"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
