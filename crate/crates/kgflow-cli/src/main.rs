use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use kgflow_cli::config::Overrides;
use kgflow_cli::runner;

/// Kernel gradient flows: particle and parametric variational inference.
#[derive(Parser)]
#[command(name = "kgflow", version, about)]
struct Cli {
    /// Path to the experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// RNG seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write an SVG plot of the recorded states.
    #[arg(long)]
    plot: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        output: cli.output,
        seed: cli.seed,
        plot: cli.plot,
    };
    match runner::run(&cli.config, &overrides) {
        Ok(out) => {
            println!(
                "wrote {} file(s) to {}",
                out.files.len(),
                out.output_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
