use std::path::PathBuf;
use std::process::ExitCode;

use branchctl::experiment::{self, exit, RunOptions};
use clap::Parser;

const EXIT_CODES: &str = "\
Exit codes:
  0  every verification check passed
  1  at least one verification check failed
  2  usage or parse error (experiment or model file)
  3  validation failure (model invariants, CFL bound, bad task parameters)
  4  I/O error (missing model file, unwritable output directory)
  5  explosion guard tripped (population exceeded max_population)
  6  numerical failure (NaN in the HJB solver)";

/// Runs a branching-diffusion experiment file and writes its reports.
#[derive(Parser, Debug)]
#[command(name = "branchctl", version, about, after_help = EXIT_CODES)]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `output` in the experiment file.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed base; overrides `simulation.seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Replications per estimate; overrides `simulation.reps`.
    #[arg(long, value_name = "N")]
    reps: Option<usize>,
    /// Worker threads for replications (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(exit::USAGE as u8);
        }
    }
    let opts = RunOptions {
        out: cli.out,
        seed: cli.seed,
        reps: cli.reps,
    };
    match experiment::run(&cli.config, &opts) {
        Ok(outcome) => {
            for t in &outcome.manifest.tasks {
                println!("{} {}", if t.pass { "PASS" } else { "FAIL" }, t.name);
            }
            println!("reports written to {}", outcome.out_dir.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
