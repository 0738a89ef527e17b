//! `ablate` subcommand: the variant/cell-order/block-split grid trained
//! under one shared toy budget, scored on a held-out synthetic split and
//! written as a CSV whose rows mirror the compared settings.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use yogo_core::data::synth_generate;
use yogo_core::eval::evaluate_model;
use yogo_core::metrics::ChannelMode;
use yogo_core::model::{CellOrder, Model, ModelConfig, Variant};
use yogo_core::train::{train, TrainOptions};
use yogo_core::{Dtype, Error, Result, Scalar};

use crate::rundir;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub budget: Budget,
    pub data: GridData,
    pub grid: GridAxes,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            budget: Budget::default(),
            data: GridData::default(),
            grid: GridAxes::default(),
        }
    }
}

/// Shared toy training budget for every grid cell.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub iterations: u64,
    pub channels: usize,
    pub frb_backward: usize,
    pub frb_forward: usize,
    pub hfb_count: usize,
    pub fe_resblocks: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: String,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            iterations: 2000,
            channels: 16,
            frb_backward: 2,
            frb_forward: 3,
            hfb_count: 3,
            fe_resblocks: 5,
            batch_size: 2,
            lr: 1e-3,
            seed: 7,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridData {
    pub synth_seed: u64,
    pub synth_count: usize,
    pub holdout: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GridData {
    fn default() -> Self {
        GridData {
            synth_seed: 100,
            synth_count: 64,
            holdout: 16,
            height: 64,
            width: 64,
        }
    }
}

/// Axes of the grid; an empty axis collapses to the budget default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub variants: Vec<String>,
    pub frb_splits: Vec<String>,
    pub cell_orders: Vec<String>,
    pub hfb_counts: Vec<usize>,
}

pub fn parse_frb_split(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('+').collect();
    if parts.len() != 2 {
        return Err(Error::config(format!(
            "frb split must look like \"4+6\", got {s:?}"
        )));
    }
    let bwd = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad frb split {s:?}")))?;
    let fwd = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad frb split {s:?}")))?;
    Ok((bwd, fwd))
}

pub struct CellResult {
    pub variant: Variant,
    pub frb: (usize, usize),
    pub cell_order: CellOrder,
    pub hfb_count: usize,
    pub psnr_all: f64,
    pub psnr_input: f64,
    pub psnr_interp: f64,
    pub ssim_all: f64,
}

pub fn run(grid_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(grid_path).map_err(|e| Error::io(grid_path, e))?;
    let spec: GridSpec =
        toml::from_str(&text).map_err(|e| Error::config(format!("grid parse: {e}")))?;
    let dtype = match spec.budget.precision.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => {
            return Err(Error::config(format!(
                "budget.precision must be f32 or f64, got {other:?}"
            )))
        }
    };
    let csv = match dtype {
        Dtype::F32 => run_grid::<f32>(&spec)?,
        Dtype::F64 => run_grid::<f64>(&spec)?,
    };
    let dir = rundir::create_run_dir("ablate", spec.budget.seed)?;
    let path = rundir::write_text(&dir, "ablation.csv", &csv)?;
    print!("{csv}");
    println!("# written to {}", path.display());
    Ok(())
}

pub fn cell_configs(spec: &GridSpec) -> Result<Vec<(Variant, (usize, usize), CellOrder, usize)>> {
    let variants = if spec.grid.variants.is_empty() {
        vec![Variant::E]
    } else {
        spec.grid
            .variants
            .iter()
            .map(|s| Variant::parse(s))
            .collect::<Result<Vec<_>>>()?
    };
    let splits = if spec.grid.frb_splits.is_empty() {
        vec![(spec.budget.frb_backward, spec.budget.frb_forward)]
    } else {
        spec.grid
            .frb_splits
            .iter()
            .map(|s| parse_frb_split(s))
            .collect::<Result<Vec<_>>>()?
    };
    let orders = if spec.grid.cell_orders.is_empty() {
        vec![CellOrder::AlignThenFuse]
    } else {
        spec.grid
            .cell_orders
            .iter()
            .map(|s| CellOrder::parse(s))
            .collect::<Result<Vec<_>>>()?
    };
    let hfbs = if spec.grid.hfb_counts.is_empty() {
        vec![spec.budget.hfb_count]
    } else {
        spec.grid.hfb_counts.clone()
    };
    let mut cells = Vec::new();
    for &v in &variants {
        for &s in &splits {
            for &o in &orders {
                for &h in &hfbs {
                    cells.push((v, s, o, h));
                }
            }
        }
    }
    Ok(cells)
}

/// Train and score one grid cell under the shared budget.
pub fn run_cell<T: Scalar>(
    spec: &GridSpec,
    variant: Variant,
    frb: (usize, usize),
    cell_order: CellOrder,
    hfb_count: usize,
) -> Result<CellResult> {
    let all = synth_generate::<T>(
        spec.data.synth_seed,
        spec.data.synth_count + spec.data.holdout,
        spec.data.height,
        spec.data.width,
    )?;
    let (train_set, holdout) = all.split_at(spec.data.synth_count);

    let cfg = ModelConfig {
        channels: spec.budget.channels,
        frb_backward: frb.0,
        frb_forward: frb.1,
        hfb_count,
        fe_resblocks: spec.budget.fe_resblocks,
        variant,
        cell_order,
        ..ModelConfig::default()
    };
    let mut model = Model::<T>::new(cfg, spec.budget.seed)?;
    let opts = TrainOptions {
        batch_size: spec.budget.batch_size,
        lr: spec.budget.lr,
        decay_factor: 0.1,
        decay_every_epochs: usize::MAX / 2,
        total_epochs: usize::MAX / 2,
        max_iterations: spec.budget.iterations,
        seed: spec.budget.seed,
        patch: None,
    };
    train(&mut model, train_set, &opts, |_, _, _, _| Ok(()))?;

    let summary = evaluate_model(&model, holdout, ChannelMode::Rgb)?;
    Ok(CellResult {
        variant,
        frb,
        cell_order,
        hfb_count,
        psnr_all: summary.aggregate.psnr_all,
        psnr_input: summary.aggregate.psnr_input_positions,
        psnr_interp: summary.aggregate.psnr_interpolated,
        ssim_all: summary.aggregate.ssim_all,
    })
}

pub fn results_to_csv(results: &[CellResult]) -> String {
    let mut out = String::from(
        "variant,frb_split,cell_order,hfb_count,single_direction,bidirection,\
         bidirectional_interaction,direct_fusion,sd_fusion,psnr_all,\
         psnr_input_positions,psnr_interpolated,ssim_all\n",
    );
    for r in results {
        let single = matches!(r.variant, Variant::A);
        let bidir = matches!(r.variant, Variant::B | Variant::C);
        let interact = matches!(r.variant, Variant::D | Variant::E);
        let sd_fusion = matches!(r.variant, Variant::C | Variant::E);
        let _ = writeln!(
            out,
            "{},{}+{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant.as_str(),
            r.frb.0,
            r.frb.1,
            r.cell_order.as_str(),
            r.hfb_count,
            single,
            bidir,
            interact,
            !sd_fusion,
            sd_fusion,
            r.psnr_all,
            r.psnr_input,
            r.psnr_interp,
            r.ssim_all
        );
    }
    out
}

fn run_grid<T: Scalar>(spec: &GridSpec) -> Result<String> {
    let cells = cell_configs(spec)?;
    let mut results = Vec::with_capacity(cells.len());
    for (variant, frb, order, hfb) in cells {
        log::info!(
            "training grid cell: variant {} frb {}+{} order {} hfb {}",
            variant.as_str(),
            frb.0,
            frb.1,
            order.as_str(),
            hfb
        );
        results.push(run_cell::<T>(spec, variant, frb, order, hfb)?);
    }
    Ok(results_to_csv(&results))
}
