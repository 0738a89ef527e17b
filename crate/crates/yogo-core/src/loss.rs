//! Supervision: structure/detail ground-truth decomposition and the
//! three-term Charbonnier loss.
//!
//! The structure of a frame is its bicubic down-up projection at the spatial
//! scale factor; the detail is the signed residue, so
//! `structure + detail = frame` up to one floating-point addition. The loss
//! takes the per-pixel mean of the Charbonnier penalty for each frame and
//! each of the three components, then sums over components and frames.

use crate::data::bicubic_resize;
use crate::error::{Error, Result};
use crate::nn::CHARBONNIER_EPS;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Ground-truth frame with its low-frequency structure and signed detail.
#[derive(Debug, Clone)]
pub struct DecomposedTarget<T> {
    pub frame: Tensor<T>,
    pub structure: Tensor<T>,
    pub detail: Tensor<T>,
}

/// Split a frame into structure (bicubic down-up at `1/scale` then `scale`)
/// and detail (residue).
pub fn decompose<T: Scalar>(frame: &Tensor<T>, scale: usize) -> Result<DecomposedTarget<T>> {
    let (_, h, w) = frame.chw()?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::data(format!(
            "decompose: {h}x{w} not divisible by scale {scale}"
        )));
    }
    let down = bicubic_resize(frame, 1.0 / scale as f64, true)?;
    let structure = bicubic_resize(&down, scale as f64, false)?;
    let mut detail = frame.clone();
    detail.axpy(-T::one(), &structure);
    Ok(DecomposedTarget {
        frame: frame.clone(),
        structure,
        detail,
    })
}

/// Elementwise Charbonnier penalty `sqrt(x^2 + w^2)`, `w = 1e-3`.
pub fn charbonnier<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let e2 = T::from_f64(CHARBONNIER_EPS * CHARBONNIER_EPS);
    x.map(|v| (v * v + e2).sqrt())
}

/// Per-component sums over frames of the mean Charbonnier penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub frame_term: f64,
    pub structure_term: f64,
    pub detail_term: f64,
}

/// Loss nodes still on the tape, for backward passes.
pub struct LossNodes {
    pub total: NodeId,
    pub frame_terms: Vec<NodeId>,
    pub structure_terms: Vec<NodeId>,
    pub detail_terms: Vec<NodeId>,
}

impl LossNodes {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let sum = |ids: &[NodeId]| ids.iter().map(|&i| tape.value(i).item().as_f64()).sum();
        LossBreakdown {
            total: tape.value(self.total).item().as_f64(),
            frame_term: sum(&self.frame_terms),
            structure_term: sum(&self.structure_terms),
            detail_term: sum(&self.detail_terms),
        }
    }
}

/// Record the training loss on the tape: for every time step, the mean
/// Charbonnier penalty of the frame, structure and detail errors, summed
/// over the three components and all `2n+1` steps.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    predictions: (&[NodeId], &[NodeId], &[NodeId]),
    targets: &[DecomposedTarget<T>],
) -> Result<LossNodes> {
    let (frames, structures, details) = predictions;
    if frames.len() != targets.len()
        || structures.len() != targets.len()
        || details.len() != targets.len()
    {
        return Err(Error::shape(format!(
            "loss: {} predictions vs {} targets",
            frames.len(),
            targets.len()
        )));
    }
    let mut frame_terms = Vec::with_capacity(targets.len());
    let mut structure_terms = Vec::with_capacity(targets.len());
    let mut detail_terms = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        for (pred, tgt, terms) in [
            (frames[t], &target.frame, &mut frame_terms),
            (structures[t], &target.structure, &mut structure_terms),
            (details[t], &target.detail, &mut detail_terms),
        ] {
            if tape.value(pred).shape() != tgt.shape() {
                return Err(Error::shape(format!(
                    "loss at step {t}: prediction {:?} vs target {:?}",
                    tape.value(pred).shape(),
                    tgt.shape()
                )));
            }
            let tgt_node = tape.leaf(tgt.clone());
            let diff = tape.sub(pred, tgt_node)?;
            terms.push(tape.charbonnier_mean(diff, CHARBONNIER_EPS));
        }
    }
    let mut all = frame_terms.clone();
    all.extend_from_slice(&structure_terms);
    all.extend_from_slice(&detail_terms);
    let total = tape.sum_scalars(&all)?;
    Ok(LossNodes {
        total,
        frame_terms,
        structure_terms,
        detail_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::stream_rng;
    use rand::Rng;

    #[test]
    fn charbonnier_values() {
        let x = Tensor::<f64>::new(vec![2], vec![0.0, 3e-3]).unwrap();
        let y = charbonnier(&x);
        assert!((y.data()[0] - 1e-3).abs() < 1e-15);
        // sqrt((3e-3)^2 + (1e-3)^2) = sqrt(1e-5)
        assert!((y.data()[1] - 1e-5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn charbonnier_is_even() {
        let mut rng = stream_rng(2, 0);
        for _ in 0..50 {
            let v: f64 = rng.gen::<f64>() * 4.0 - 2.0;
            let pos = charbonnier(&Tensor::scalar(v));
            let neg = charbonnier(&Tensor::scalar(-v));
            assert_eq!(pos.data()[0], neg.data()[0]);
        }
    }

    #[test]
    fn decompose_constant_image() {
        let img = Tensor::<f64>::full(&[3, 8, 8], 0.6);
        let d = decompose(&img, 4).unwrap();
        assert!(d.structure.max_abs_diff(&img) < 1e-12);
        assert!(d.detail.max_abs_diff(&Tensor::zeros(&[3, 8, 8])) < 1e-12);
    }

    #[test]
    fn decompose_reconstructs_exactly() {
        let mut rng = stream_rng(3, 0);
        let img = Tensor::<f64>::from_fn(&[3, 16, 16], |_| rng.gen::<f64>());
        let d = decompose(&img, 4).unwrap();
        let mut recon = d.structure.clone();
        recon.add_assign(&d.detail);
        // exact up to the rounding of the final addition
        assert!(recon.max_abs_diff(&img) <= 4.5e-16);
    }

    #[test]
    fn decompose_rejects_unaligned_dims() {
        let img = Tensor::<f64>::zeros(&[3, 10, 8]);
        assert!(decompose(&img, 4).is_err());
    }

    #[test]
    fn decompose_separates_frequencies() {
        use std::f64::consts::PI;
        // a sinusoid with period far above the scale factor survives the
        // down-up round trip almost untouched
        let low = Tensor::<f64>::from_fn(&[3, 64, 64], |i| {
            let x = (i % 64) as f64;
            0.5 + 0.4 * (2.0 * PI * x / 256.0).sin()
        });
        let d = decompose(&low, 4).unwrap();
        let low_detail = d.detail.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(low_detail < 0.02, "low-frequency detail {low_detail}");

        // a Nyquist checkerboard is pure detail
        let checker = Tensor::<f64>::from_fn(&[3, 32, 32], |i| {
            let x = i % 32;
            let y = (i / 32) % 32;
            if (x + y) % 2 == 0 {
                0.8
            } else {
                0.2
            }
        });
        let d = decompose(&checker, 4).unwrap();
        let hi_detail = d.detail.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(hi_detail > 0.2, "checkerboard detail {hi_detail}");
    }

    #[test]
    fn decompose_near_idempotence_measured_on_corpus() {
        // The antialiased down-up pass is not a projection: mid-band content
        // is attenuated a second time and image borders add renormalization
        // error, so re-decomposing a structure leaves a few-percent residue
        // (identical to the PIL convention of the same kernel). Measure it on
        // a synthetic corpus, print it, and guard against regressions.
        let seqs = crate::data::synth_generate::<f64>(17, 4, 32, 32).unwrap();
        let mut worst = 0.0f64;
        for seq in &seqs {
            for frame in &seq.frames {
                let first = decompose(frame, 4).unwrap();
                let second = decompose(&first.structure, 4).unwrap();
                let inf = second.detail.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                worst = worst.max(inf);
            }
        }
        println!("decompose idempotence residue on corpus: {worst:.3e}");
        assert!(worst <= 0.1, "idempotence residue regressed: {worst}");
    }

    #[test]
    fn perfect_prediction_loss_is_floor() {
        let mut rng = stream_rng(5, 0);
        for n in [1usize, 3] {
            let count = 2 * n + 1;
            let targets: Vec<DecomposedTarget<f64>> = (0..count)
                .map(|_| {
                    let img = Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
                    decompose(&img, 4).unwrap()
                })
                .collect();
            let mut tape = Tape::new();
            let frames: Vec<NodeId> = targets.iter().map(|t| tape.leaf(t.frame.clone())).collect();
            let structures: Vec<NodeId> = targets
                .iter()
                .map(|t| tape.leaf(t.structure.clone()))
                .collect();
            let details: Vec<NodeId> =
                targets.iter().map(|t| tape.leaf(t.detail.clone())).collect();
            let loss = total_loss(&mut tape, (&frames, &structures, &details), &targets).unwrap();
            let want = 3.0 * count as f64 * 1e-3;
            let got = tape.value(loss.total).item();
            assert!((got - want).abs() < 1e-9, "n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn loss_matches_scalar_loop_oracle() {
        let mut rng = stream_rng(6, 0);
        let targets: Vec<DecomposedTarget<f64>> = (0..3)
            .map(|_| {
                let img = Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
                decompose(&img, 4).unwrap()
            })
            .collect();
        let preds: Vec<Vec<Tensor<f64>>> = (0..3)
            .map(|_| {
                (0..3)
                    .map(|_| Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>() * 2.0 - 0.5))
                    .collect()
            })
            .collect();

        let mut tape = Tape::new();
        let frames: Vec<NodeId> = preds[0].iter().map(|p| tape.leaf(p.clone())).collect();
        let structures: Vec<NodeId> = preds[1].iter().map(|p| tape.leaf(p.clone())).collect();
        let details: Vec<NodeId> = preds[2].iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = total_loss(&mut tape, (&frames, &structures, &details), &targets).unwrap();

        // naive per-element loop
        let mut want = 0.0;
        for t in 0..3 {
            for (pred, tgt) in [
                (&preds[0][t], &targets[t].frame),
                (&preds[1][t], &targets[t].structure),
                (&preds[2][t], &targets[t].detail),
            ] {
                let mut acc = 0.0;
                for (p, g) in pred.data().iter().zip(tgt.data()) {
                    let d = p - g;
                    acc += (d * d + 1e-6).sqrt();
                }
                want += acc / pred.len() as f64;
            }
        }
        let got = tape.value(loss.total).item();
        assert!(
            (got - want).abs() / want.abs() <= 1e-9,
            "{got} vs oracle {want}"
        );

        let breakdown = loss.breakdown(&tape);
        assert!((breakdown.total - got).abs() < 1e-12);
        assert!(
            (breakdown.frame_term + breakdown.structure_term + breakdown.detail_term - got).abs()
                < 1e-9
        );
    }

    #[test]
    fn loss_is_bounded_below_by_floor() {
        let mut rng = stream_rng(7, 0);
        let n = 1;
        let count = 2 * n + 1;
        let targets: Vec<DecomposedTarget<f64>> = (0..count)
            .map(|_| {
                let img = Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
                decompose(&img, 4).unwrap()
            })
            .collect();
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape<f64>, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<NodeId> {
            (0..count)
                .map(|_| {
                    let t = Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
                    tape.leaf(t)
                })
                .collect()
        };
        let frames = mk(&mut tape, &mut rng);
        let structures = mk(&mut tape, &mut rng);
        let details = mk(&mut tape, &mut rng);
        let loss = total_loss(&mut tape, (&frames, &structures, &details), &targets).unwrap();
        assert!(tape.value(loss.total).item() >= 3.0 * count as f64 * 1e-3);
    }

    #[test]
    fn loss_rejects_count_mismatch() {
        let targets: Vec<DecomposedTarget<f64>> = (0..3)
            .map(|_| decompose(&Tensor::full(&[3, 8, 8], 0.5), 4).unwrap())
            .collect();
        let mut tape = Tape::new();
        let two: Vec<NodeId> = (0..2)
            .map(|_| tape.leaf(Tensor::<f64>::zeros(&[3, 8, 8])))
            .collect();
        let three: Vec<NodeId> = (0..3)
            .map(|_| tape.leaf(Tensor::<f64>::zeros(&[3, 8, 8])))
            .collect();
        assert!(total_loss(&mut tape, (&two, &three, &three), &targets).is_err());
    }
}
