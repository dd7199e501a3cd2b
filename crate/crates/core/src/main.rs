//! `quantkd` command line: pretrain a teacher, distill a quantized student,
//! evaluate checkpoints, and expand ablation grids.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quantkd::config::{parse_config_with_overrides, RunConfig};
use quantkd::runner;

#[derive(Parser)]
#[command(name = "quantkd", version, about = "Quantization-aware training with label-free distillation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config override, e.g. `--set loss.rho=4` (repeatable,
    /// last one wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a full-precision teacher with label cross-entropy.
    Pretrain(RunArgs),
    /// Quantization-aware training of the student (distilled per the
    /// config's loss mode).
    Qat(RunArgs),
    /// Evaluate the run directory's checkpoint on the test split.
    Eval(RunArgs),
    /// Run the config's ablation grid, one output directory per combination.
    Ablate(RunArgs),
}

fn load(args: &RunArgs) -> quantkd::Result<RunConfig> {
    let mut cfg = parse_config_with_overrides(&args.config, &args.set)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cmd: &Cmd) -> quantkd::Result<()> {
    match cmd {
        Cmd::Pretrain(args) => {
            let cfg = load(args)?;
            let record = runner::run_pretrain(&cfg)?;
            println!(
                "pretrain done: top1 {:.4} after {} epochs -> {}",
                record.final_top1(),
                record.epochs.len(),
                cfg.out_dir.display()
            );
        }
        Cmd::Qat(args) => {
            let cfg = load(args)?;
            let (record, cost) = runner::run_qat(&cfg)?;
            println!(
                "qat done: top1 {:.4} after {} epochs (cost {:.6}s) -> {}",
                record.final_top1(),
                record.epochs.len(),
                cost.total,
                cfg.out_dir.display()
            );
        }
        Cmd::Eval(args) => {
            let cfg = load(args)?;
            let accs = runner::run_eval(&cfg)?;
            for (k, acc) in accs {
                println!("top{k} {acc:.6}");
            }
        }
        Cmd::Ablate(args) => {
            let cfg = load(args)?;
            let dirs = runner::run_ablate(&cfg)?;
            println!("ablate done: {} runs", dirs.len());
            for d in dirs {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
