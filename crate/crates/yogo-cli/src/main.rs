//! Command-line harness: training, evaluation, gradient checking, ablation
//! grids and synthetic-data export.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error, 3 data
//! error.

mod ablate;
mod config;
mod evalcmd;
mod rundir;
mod traincmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use yogo_core::Error;

#[derive(Parser)]
#[command(name = "yogo", about = "Space-time video super-resolution harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overfit the first sequence (whole frames, no augmentation).
        #[arg(long)]
        overfit_one: bool,
    },
    /// Evaluate a checkpoint on a septuplet directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score on the Rec. 601 luma channel instead of RGB.
        #[arg(long)]
        luma: bool,
        /// Write PNG frame/structure/detail dumps next to metrics.json.
        #[arg(long)]
        dump: bool,
    },
    /// Finite-difference verification of every registered operation.
    Gradcheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Train and compare a grid of model variants under a shared budget.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Generate synthetic septuplet sequences as PNG folders.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Checkpoint(_) => 2,
        Error::Data(_) | Error::Io { .. } => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train {
            config,
            seed,
            overfit_one,
        } => traincmd::run(&config, seed, overfit_one),
        Command::Eval {
            ckpt,
            data,
            luma,
            dump,
        } => evalcmd::run(&ckpt, &data, luma, dump),
        Command::Gradcheck { seed } => return gradcheck(seed),
        Command::Ablate { grid } => ablate::run(&grid),
        Command::Synth {
            count,
            seed,
            out,
            height,
            width,
        } => synth(count, seed, &out, height, width),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn gradcheck(seed: u64) -> ExitCode {
    let reports = yogo_core::gradcheck::run_suite(seed);
    println!("{:<18} {:>14} {:>10} {:>8}", "op", "max_rel_err", "threshold", "status");
    let mut all_ok = true;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        all_ok &= r.passed();
        println!(
            "{:<18} {:>14.3e} {:>10.0e} {:>8}",
            r.op, r.max_rel_err, r.threshold, status
        );
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: gradient check failed");
        ExitCode::from(1)
    }
}

fn synth(
    count: usize,
    seed: u64,
    out: &std::path::Path,
    height: usize,
    width: usize,
) -> yogo_core::Result<()> {
    let sequences = yogo_core::data::synth_generate::<f32>(seed, count, height, width)?;
    for (i, seq) in sequences.iter().enumerate() {
        yogo_core::data::export_sequence(&out.join(format!("seq_{i:04}")), seq)?;
    }
    println!(
        "wrote {count} sequences of 7 frames ({width}x{height}) under {}",
        out.display()
    );
    Ok(())
}
