use std::path::PathBuf;
use std::process::ExitCode;

use bst_cli::bench::{run_bench, write_bench};
use bst_cli::commands::{describe, prepare_out, run_gradcheck, run_kernel, run_lengen, run_train};
use bst_cli::workers::{deterministic, resolve_workers, with_workers};
use bst_cli::{CliError, Result, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "bst", version, about = "Block-state transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; `BST_DETERMINISTIC=1` forces one.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Floating point precision; f32 is accepted by `bench` only.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Time layer forward passes over a sweep of sequence lengths.
    Bench,
    /// Train on the configured task and save a checkpoint.
    Train,
    /// Finite-difference check of every variant and kernel family.
    Gradcheck,
    /// Train at one length and evaluate at 1/2, 1, 2 and 4 times it.
    Lengen,
    /// Dump the kernels of one block-state layer.
    Kernel,
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.precision == Precision::F32 && !matches!(cli.command, Command::Bench) {
        return Err(CliError::config("--precision f32 is only available for bench"));
    }
    let workers = resolve_workers(cli.workers);
    if deterministic() {
        eprintln!("BST_DETERMINISTIC=1: running on a single worker");
    }
    let out = cli.out.as_path();
    let log = |m: &str| eprintln!("{m}");
    with_workers(workers, || match cli.command {
        Command::Bench => {
            prepare_out(&cfg, out)?;
            let report = match cli.precision {
                Precision::F32 => run_bench::<f32>(&cfg.bench, cfg.model.seed, log)?,
                Precision::F64 => run_bench::<f64>(&cfg.bench, cfg.model.seed, log)?,
            };
            write_bench(out, &report)
        }
        Command::Train => {
            let outcome = run_train(&cfg, out, log)?;
            println!("{}: {}", cfg.model.label(), describe(&outcome.eval));
            Ok(())
        }
        Command::Gradcheck => {
            let cases = run_gradcheck(&cfg, out, log)?;
            let failed = cases.iter().filter(|c| !c.passed).count();
            println!("{} of {} cases passed", cases.len() - failed, cases.len());
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} gradient check case(s) exceeded tolerance {}", cfg.fd_tol)));
            }
            Ok(())
        }
        Command::Lengen => {
            for r in run_lengen(&cfg, out, log)? {
                println!("{} {} L={} loss {:.4} accuracy {:.4}", r.variant, r.family.name(), r.eval_len, r.loss, r.accuracy);
            }
            Ok(())
        }
        Command::Kernel => run_kernel(&cfg, out),
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
