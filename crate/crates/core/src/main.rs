use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtq::io::{execute, parse_config, Mode, RunConfig};
use dtq::DtqError;

#[derive(Parser)]
#[command(
    name = "dtq",
    version,
    about = "Adaptive density tracking for SDE transition densities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the mode named in the config file.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the adaptive solver, then the trapezoid baseline on a grid built
    /// from the adaptive mesh extents.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Grid padding as a fraction of the adaptive extent.
        #[arg(long)]
        buffer: f64,
        /// Grid spacing.
        #[arg(long)]
        kappa: f64,
    },
    /// Check the config file and print the resolved settings.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; DTQ_THREADS takes precedence.
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code(e: &DtqError) -> u8 {
    match e {
        DtqError::Validation(_) | DtqError::Config(_) | DtqError::NotFound(_) => 2,
        DtqError::ResourceLimit { .. } | DtqError::MeshCollapse { .. } => 3,
        _ => 1,
    }
}

fn init_threads(flag: Option<usize>) -> Result<(), DtqError> {
    let env = std::env::var("DTQ_THREADS").ok();
    let threads = match env.as_deref().map(str::trim) {
        Some(v) if !v.is_empty() => Some(v.parse::<usize>().map_err(|_| {
            DtqError::Validation(vec![format!("DTQ_THREADS = `{v}` is not a thread count")])
        })?),
        _ => flag,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DtqError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run_config(config: RunConfig) -> Result<(), DtqError> {
    let manifest = execute(&config)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let out = config.output_dir.display();
    println!("steps: {}", manifest.steps.len() + 1);
    println!("peak mesh size: {}", manifest.peak_mesh_size);
    if let Some(e) = manifest.errors_final {
        println!("L2p error at t = {}: {:.3e}", e.time, e.l2p);
    }
    if let Some(r) = &manifest.reference {
        println!("reference grid: {} points", r.grid_size);
    }
    if let Some(d) = manifest.discrepancy {
        println!("discrepancy L2p: {:.3e} over {} points", d.l2p, d.samples);
    }
    println!("wall time: {:.2} s", manifest.wall_seconds);
    println!("manifest written to {out}/manifest.json");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => parse_config(&config).map(|c| print!("{}", c.to_toml())),
        Command::Run { common } => init_threads(common.threads)
            .and_then(|_| parse_config(&common.config))
            .and_then(run_config),
        Command::Compare {
            common,
            buffer,
            kappa,
        } => init_threads(common.threads)
            .and_then(|_| parse_config(&common.config))
            .and_then(|mut c| {
                c.mode = Mode::Compare;
                c.buffer = Some(buffer);
                c.kappa = Some(kappa);
                // re-run validation with the overrides applied
                dtq::io::parse_config_str(&c.to_toml())
            })
            .and_then(run_config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
