use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use capkernel::selftest::{run_all, SelftestConfig};
use capkernel::Exec;

mod capture;
mod error;
mod gen;
mod kernel;
mod manifest;

use error::CliError;

/// Infinite-width transformer kernels, task generators and capture sweeps.
#[derive(Parser, Debug)]
#[command(name = "capkernel", version)]
struct Cli {
    /// Worker threads (default: all cores, or RAYON_NUM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a task dataset.
    Gen(gen::GenArgs),
    /// Recompute the labels of a dataset with the exact oracles.
    Verify {
        /// Dataset written by `gen`.
        data: PathBuf,
    },
    /// Evaluate the transformer kernel between two dataset records.
    Kernel(kernel::KernelArgs),
    /// Run a capture sweep from a TOML config.
    Capture(capture::CaptureArgs),
    /// Run the built-in numerical self-checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the reports as JSON.
        #[arg(long)]
        json: bool,
        /// Offset every ReLU dual value, to confirm the checks catch it.
        #[arg(long, hide = true)]
        mutate_dual: Option<f64>,
    },
}

fn selftest(seed: u64, json: bool, mutate: Option<f64>, exec: Exec) -> Result<(), CliError> {
    let reports = run_all(&SelftestConfig {
        seed,
        exec,
        relu_mutation: mutate,
    });
    if json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("reports serialize"));
    } else {
        for r in &reports {
            let status = if r.passed { "PASS" } else { "FAIL" };
            println!("{status} {:<22} {:>7.2} s  {}", r.name, r.seconds, r.detail);
        }
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("self-test failures: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Gen(args) => gen::run_gen(&args, exec),
        Command::Verify { data } => gen::verify(&data, exec).map(|_| ()),
        Command::Kernel(args) => kernel::run_kernel(&args, exec),
        Command::Capture(args) => capture::run(&args, exec),
        Command::Selftest { seed, json, mutate_dual } => selftest(seed, json, mutate_dual, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
