use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smolhom::cli;

/// Coagulation-fragmentation-diffusion workbench on perforated domains.
#[derive(Parser)]
#[command(name = "smolhom", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the per-species solves (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress lines and warnings.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Check the configured coefficient tables and print the report.
    ValidateKernels,
    /// Solve the periodic cell problems and emit the effective tensor.
    Cell,
    /// Run the fine-scale system on the perforated grid.
    Micro,
    /// Run the homogenized system on the plain grid.
    Macro,
    /// Run cell, macro, and the epsilon sweep, then compare.
    Compare,
    /// Space-homogeneous reaction benchmark.
    Zerod,
}

impl From<Command> for cli::Subcommand {
    fn from(value: Command) -> Self {
        match value {
            Command::ValidateKernels => cli::Subcommand::ValidateKernels,
            Command::Cell => cli::Subcommand::Cell,
            Command::Micro => cli::Subcommand::Micro,
            Command::Macro => cli::Subcommand::Macro,
            Command::Compare => cli::Subcommand::Compare,
            Command::Zerod => cli::Subcommand::Zerod,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(threads) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("{{\"kind\":\"config\",\"message\":\"thread pool: {e}\"}}");
            return ExitCode::from(2);
        }
    }

    let config = match cli::load_config(&args.config) {
        Ok(config) => config,
        Err(e) => {
            let e = cli::CliError::from(e);
            eprintln!("{}", e.to_json());
            return ExitCode::from(2);
        }
    };
    let out_dir = args
        .out
        .unwrap_or_else(|| PathBuf::from(&config.output_dir));

    match cli::orchestrate(args.command.into(), &config, &out_dir, args.quiet) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
