//! `train` subcommand: build the dataset, run the schedule, write
//! `loss.csv`, per-epoch checkpoints and `ckpt_final.bin` into a fresh run
//! directory.

use std::path::Path;

use yogo_core::checkpoint::{self, Checkpoint};
use yogo_core::data::{synth_generate, FrameSequence};
use yogo_core::model::Model;
use yogo_core::train::{train, LossTrace};
use yogo_core::{Dtype, Error, Result, Scalar};

use crate::config::RunConfig;
use crate::rundir;

pub fn run(config_path: &Path, seed_override: Option<u64>, overfit_one: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    match cfg.dtype()? {
        Dtype::F32 => run_typed::<f32>(&cfg, overfit_one),
        Dtype::F64 => run_typed::<f64>(&cfg, overfit_one),
    }
}

pub fn load_dataset<T: Scalar>(cfg: &RunConfig) -> Result<Vec<FrameSequence<T>>> {
    let from_root = !cfg.data.root.is_empty();
    let from_synth = cfg.data.synth_count > 0;
    match (from_root, from_synth) {
        (true, false) => {
            let root = Path::new(&cfg.data.root);
            let sequences = yogo_core::data::ingest::<T>(root)?.collect::<Result<Vec<_>>>()?;
            if sequences.is_empty() {
                return Err(Error::data(format!(
                    "no usable sequences under {}",
                    root.display()
                )));
            }
            Ok(sequences)
        }
        (false, true) => synth_generate(
            cfg.data.synth_seed,
            cfg.data.synth_count,
            cfg.data.synth_height,
            cfg.data.synth_width,
        ),
        (true, true) => Err(Error::config(
            "set either data.root or data.synth_count, not both",
        )),
        (false, false) => Err(Error::config(
            "no data source: set data.root or data.synth_count",
        )),
    }
}

fn run_typed<T: Scalar>(cfg: &RunConfig, overfit_one: bool) -> Result<()> {
    let mut dataset = load_dataset::<T>(cfg)?;
    if cfg.data.holdout > 0 {
        if cfg.data.holdout >= dataset.len() {
            return Err(Error::config(format!(
                "holdout {} leaves no training data ({} sequences)",
                cfg.data.holdout,
                dataset.len()
            )));
        }
        dataset.truncate(dataset.len() - cfg.data.holdout);
    }

    let mut opts = cfg.train_options();
    if overfit_one {
        dataset.truncate(1);
        opts.batch_size = 1;
        opts.patch = None;
    }

    let dir = rundir::create_run_dir("train", cfg.seed)?;
    let resolved = cfg.to_toml();
    rundir::write_text(&dir, "config.toml", &resolved)?;
    log::info!(
        "training on {} sequences, run dir {}",
        dataset.len(),
        dir.display()
    );

    let mut model = Model::<T>::new(cfg.model_config()?, cfg.seed)?;
    let every = cfg.train.checkpoint_every_epochs.max(1);
    let tail = cfg.train.trace_tail;
    let outcome = train(&mut model, &dataset, &opts, |model, epoch, iteration, trace| {
        if (epoch + 1) % every == 0 {
            let path = dir.join(format!("ckpt_epoch_{:04}.bin", epoch + 1));
            checkpoint::save(
                &path,
                &Checkpoint::from_model(model, &resolved, epoch as u64 + 1, iteration, trace.tail(tail)),
            )?;
        }
        log_epoch(epoch, trace);
        Ok(())
    })?;

    rundir::write_text(&dir, "loss.csv", &outcome.trace.to_csv())?;
    checkpoint::save(
        &dir.join("ckpt_final.bin"),
        &Checkpoint::from_model(
            &model,
            &resolved,
            outcome.epochs_completed as u64,
            outcome.iterations,
            outcome.trace.tail(tail),
        ),
    )?;
    let last = outcome.trace.rows.last();
    println!(
        "trained {} iterations over {} epochs; final loss {}; artifacts in {}",
        outcome.iterations,
        outcome.epochs_completed,
        last.map(|r| r.total.to_string()).unwrap_or_else(|| "n/a".into()),
        dir.display()
    );
    Ok(())
}

fn log_epoch(epoch: usize, trace: &LossTrace) {
    if let Some(row) = trace.rows.last() {
        log::info!(
            "epoch {epoch} done: iteration {} loss {:.6} lr {:.1e}",
            row.iteration,
            row.total,
            row.lr
        );
    }
}
