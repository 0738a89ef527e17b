//! Seeded training loop: shuffled batches, per-sample augmentation and
//! degradation, data-parallel forward/backward over the batch, and an
//! AdaMax parameter update with epoch-step learning-rate decay
//! (`lr(epoch) = lr0 * decay^(epoch / decay_every)`).
//!
//! Gradients are averaged in batch-slot order, so runs are bit-identical for
//! a fixed seed regardless of thread scheduling.

use rayon::prelude::*;

use crate::data::{augment_with, batch_indices, degrade, FrameSequence};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const ADAMAX_BETA1: f64 = 0.9;
pub const ADAMAX_BETA2: f64 = 0.999;
pub const ADAMAX_EPS: f64 = 1e-8;

/// AdaMax optimizer state (infinity-norm variant of Adam).
pub struct AdaMax<T> {
    m: Vec<Tensor<T>>,
    u: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdaMax<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros: Vec<Tensor<T>> = model
            .store
            .iter()
            .map(|(_, _, v)| Tensor::zeros(v.shape()))
            .collect();
        AdaMax {
            m: zeros.clone(),
            u: zeros,
            step: 0,
        }
    }

    /// One update: `m = b1*m + (1-b1)*g`, `u = max(b2*u, |g|)`,
    /// `theta -= lr/(1-b1^t) * m/(u+eps)`.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let b1 = T::from_f64(ADAMAX_BETA1);
        let b2 = T::from_f64(ADAMAX_BETA2);
        let eps = T::from_f64(ADAMAX_EPS);
        let one_m_b1 = T::one() - b1;
        let correction = T::from_f64(lr / (1.0 - ADAMAX_BETA1.powi(self.step as i32)));
        for (idx, pid) in model.store.ids().enumerate().collect::<Vec<_>>() {
            let Some(g) = grads[idx].as_ref() else {
                continue;
            };
            let m = &mut self.m[idx];
            let u = &mut self.u[idx];
            let value = model.store.value_mut(pid);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + one_m_b1 * gi;
                let ui = (b2 * u.data()[i]).max(gi.abs());
                m.data_mut()[i] = mi;
                u.data_mut()[i] = ui;
                value.data_mut()[i] -= correction * mi / (ui + eps);
            }
        }
    }
}

/// One loss-trace record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub total: f64,
    pub frame_term: f64,
    pub structure_term: f64,
    pub detail_term: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total,frame_term,structure_term,detail_term,lr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration, r.total, r.frame_term, r.structure_term, r.detail_term, r.lr
            ));
        }
        out
    }

    pub fn tail(&self, n: usize) -> &[TraceRow] {
        let start = self.rows.len().saturating_sub(n);
        &self.rows[start..]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub total_epochs: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_iterations: u64,
    pub seed: u64,
    /// Crop size `(width, height)`; `None` trains on whole frames without
    /// augmentation.
    pub patch: Option<(usize, usize)>,
}

impl TrainOptions {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr
            * self
                .decay_factor
                .powi((epoch / self.decay_every_epochs.max(1)) as i32)
    }
}

pub struct TrainOutcome {
    pub trace: LossTrace,
    pub iterations: u64,
    pub epochs_completed: usize,
}

fn sample_seed(seed: u64, epoch: u64, iteration: u64, slot: u64) -> u64 {
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(iteration.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
        .wrapping_add(slot.wrapping_mul(0x1656_67b1_9e37_79f9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// Run the schedule. `on_epoch_end` fires after each completed epoch (and
/// after a mid-epoch stop at the iteration cap) so the caller can persist
/// checkpoints.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[FrameSequence<T>],
    opts: &TrainOptions,
    mut on_epoch_end: impl FnMut(&Model<T>, usize, u64, &LossTrace) -> Result<()>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    if opts.batch_size > dataset.len() {
        return Err(Error::config(format!(
            "batch_size {} exceeds dataset size {}",
            opts.batch_size,
            dataset.len()
        )));
    }

    let mut optimizer = AdaMax::new(model);
    let mut trace = LossTrace::default();
    let mut iteration: u64 = 0;
    let mut epochs_completed = 0;

    'epochs: for epoch in 0..opts.total_epochs {
        let lr = opts.lr_at_epoch(epoch);
        for batch in batch_indices(dataset.len(), opts.batch_size, opts.seed, epoch as u64) {
            let results: Vec<Result<(f64, f64, f64, f64, Vec<Option<Tensor<T>>>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &sample_idx)| {
                    let seq = &dataset[sample_idx];
                    let aug = match opts.patch {
                        Some((pw, ph)) => augment_with(
                            seq,
                            sample_seed(opts.seed, epoch as u64, iteration, slot as u64),
                            pw,
                            ph,
                        )?,
                        None => seq.clone(),
                    };
                    let sample = degrade(&aug)?;
                    let mut tape = Tape::new();
                    let out = model.forward(&mut tape, &sample.lr_inputs)?;
                    let loss = total_loss(
                        &mut tape,
                        (&out.frames, &out.structures, &out.details),
                        &sample.hr_targets,
                    )?;
                    let grads = tape.backward(loss.total)?;
                    let param_grads = tape.param_grads(&model.store, &grads);
                    let b = loss.breakdown(&tape);
                    Ok((b.total, b.frame_term, b.structure_term, b.detail_term, param_grads))
                })
                .collect();

            // fixed-order reduction keeps runs bit-identical
            let mut summed: Vec<Option<Tensor<T>>> = (0..model.store.len()).map(|_| None).collect();
            let mut totals = (0.0, 0.0, 0.0, 0.0);
            for r in results {
                let (total, frame, structure, detail, grads) = r?;
                totals.0 += total;
                totals.1 += frame;
                totals.2 += structure;
                totals.3 += detail;
                for (acc, g) in summed.iter_mut().zip(grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(b)) => a.add_assign(&b),
                        (None, Some(b)) => *acc = Some(b),
                        _ => {}
                    }
                }
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            for g in summed.iter_mut().flatten() {
                g.scale(inv);
            }

            optimizer.step(model, &summed, lr);
            iteration += 1;
            let n = batch.len() as f64;
            trace.rows.push(TraceRow {
                iteration,
                total: totals.0 / n,
                frame_term: totals.1 / n,
                structure_term: totals.2 / n,
                detail_term: totals.3 / n,
                lr,
            });

            if opts.max_iterations > 0 && iteration >= opts.max_iterations {
                on_epoch_end(model, epoch, iteration, &trace)?;
                epochs_completed = epoch;
                break 'epochs;
            }
        }
        epochs_completed = epoch + 1;
        on_epoch_end(model, epoch, iteration, &trace)?;
    }

    Ok(TrainOutcome {
        trace,
        iterations: iteration,
        epochs_completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::{ModelConfig, Variant};

    fn overfit_cfg() -> ModelConfig {
        ModelConfig {
            channels: 8,
            frb_backward: 1,
            frb_forward: 1,
            hfb_count: 1,
            fe_resblocks: 1,
            variant: Variant::E,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn lr_schedule_steps_by_decade() {
        let opts = TrainOptions {
            batch_size: 1,
            lr: 1e-4,
            decay_factor: 0.1,
            decay_every_epochs: 30,
            total_epochs: 70,
            max_iterations: 0,
            seed: 0,
            patch: None,
        };
        assert_eq!(opts.lr_at_epoch(0), 1e-4);
        assert_eq!(opts.lr_at_epoch(29), 1e-4);
        assert!((opts.lr_at_epoch(30) - 1e-5).abs() < 1e-20);
        assert!((opts.lr_at_epoch(60) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn overfit_single_sequence_halves_loss() {
        // gradient flow gate: 200 steps on one sequence at lr 1e-3
        let mut model = Model::<f64>::new(overfit_cfg(), 7).unwrap();
        let dataset: Vec<_> = synth_generate::<f64>(3, 1, 16, 16).unwrap();
        let opts = TrainOptions {
            batch_size: 1,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every_epochs: 1000,
            total_epochs: 200,
            max_iterations: 200,
            seed: 1,
            patch: None,
        };
        let outcome = train(&mut model, &dataset, &opts, |_, _, _, _| Ok(())).unwrap();
        let first = outcome.trace.rows.first().unwrap().total;
        let last = outcome.trace.rows.last().unwrap().total;
        assert!(
            last < 0.5 * first,
            "loss should halve when overfitting: {first} -> {last}"
        );
    }

    #[test]
    fn training_is_bit_deterministic() {
        let dataset: Vec<_> = synth_generate::<f32>(5, 4, 16, 16).unwrap();
        let run = || {
            let mut model = Model::<f32>::new(overfit_cfg(), 3).unwrap();
            let opts = TrainOptions {
                batch_size: 2,
                lr: 1e-3,
                decay_factor: 0.1,
                decay_every_epochs: 30,
                total_epochs: 2,
                max_iterations: 0,
                seed: 11,
                patch: Some((8, 8)),
            };
            let outcome = train(&mut model, &dataset, &opts, |_, _, _, _| Ok(())).unwrap();
            outcome.trace.to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_oversized_batch() {
        let mut model = Model::<f64>::new(overfit_cfg(), 0).unwrap();
        let dataset: Vec<_> = synth_generate::<f64>(1, 1, 16, 16).unwrap();
        let opts = TrainOptions {
            batch_size: 2,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every_epochs: 30,
            total_epochs: 1,
            max_iterations: 0,
            seed: 0,
            patch: None,
        };
        assert!(train(&mut model, &dataset, &opts, |_, _, _, _| Ok(())).is_err());
    }
}

#[cfg(test)]
mod timing {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::{ModelConfig, Variant};

    #[test]
    #[ignore = "manual timing probe"]
    fn toy_iteration_cost() {
        let cfg = ModelConfig {
            channels: 16,
            frb_backward: 2,
            frb_forward: 3,
            hfb_count: 3,
            fe_resblocks: 5,
            variant: Variant::E,
            ..ModelConfig::default()
        };
        let mut model = Model::<f32>::new(cfg, 7).unwrap();
        let dataset: Vec<_> = synth_generate::<f32>(5, 4, 64, 64).unwrap();
        let opts = TrainOptions {
            batch_size: 2,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every_epochs: 1000,
            total_epochs: 100,
            max_iterations: 10,
            seed: 1,
            patch: None,
        };
        let start = std::time::Instant::now();
        let outcome = train(&mut model, &dataset, &opts, |_, _, _, _| Ok(())).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        println!(
            "{} iterations in {:.2}s ({:.3}s/iter) -> 2000 iters ~ {:.1} min",
            outcome.iterations,
            elapsed,
            elapsed / outcome.iterations as f64,
            elapsed / outcome.iterations as f64 * 2000.0 / 60.0
        );
    }
}
