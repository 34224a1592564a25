use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use ghost_cli::{resolve_workers, run, Command, Model, Overrides, RunConfig};

/// Studies of slow Couette flow between rotating cylinders in the small
/// Knudsen number limit.
#[derive(Parser, Debug)]
#[command(name = "ghost-couette", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration; omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// worker threads (falls back to GHOST_COUETTE_WORKERS)
    #[arg(long)]
    workers: Option<usize>,
    /// Knudsen number; a comma-separated list replaces a sweep
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "c-const")]
    c_const: Option<f64>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    /// print the effective configuration and exit
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.command = cli.command;
    cfg.apply(&Overrides {
        output_dir: cli.output.clone(),
        seed: cli.seed,
        workers: resolve_workers(cli.workers)?,
        eps: cli.eps.clone(),
        gamma: cli.gamma,
        c_const: cli.c_const,
        order: cli.order,
        model: cli.model,
    });
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let report = run(&cfg)?;
    for c in &report.summary.criteria {
        println!("{}", c.line());
    }
    println!("wrote {}", report.run_dir.display());
    Ok(())
}
