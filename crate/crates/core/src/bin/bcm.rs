use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bcm::cli::{exit_code, run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "bcm", version, about = "Barycentric coding model: coordinate estimation and synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Estimate coordinates of a query point cloud.
    EstimateCoords,
    /// Covariance estimation study.
    Covariance,
    /// Image inpainting and denoising study.
    Inpaint,
    /// Barycenter from coordinates and references.
    Synthesize,
    /// Gram matrix convergence study.
    Convergence,
    /// Classification study.
    Classify,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::EstimateCoords => Command::EstimateCoords,
            Cmd::Covariance => Command::Covariance,
            Cmd::Inpaint => Command::Inpaint,
            Cmd::Synthesize => Command::Synthesize,
            Cmd::Convergence => Command::Convergence,
            Cmd::Classify => Command::Classify,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: invalid thread count {n}");
            return ExitCode::from(2);
        }
    }
    let opts = RunOptions {
        config: cli.config,
        seed: cli.seed,
        epsilon: cli.epsilon,
        out: cli.out,
    };
    if let Err(e) = std::fs::create_dir_all(&opts.out) {
        eprintln!("error: cannot create {}: {e}", opts.out.display());
        return ExitCode::from(1);
    }
    match run(cli.command.into(), &opts) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
