//! Central finite-difference verification of every differentiable operation,
//! plus a sampled end-to-end check through the whole network and loss.
//!
//! All checks run in `f64` with step `1e-5`. Per-op relative error must stay
//! below `1e-4`; the end-to-end sampled-parameter check below `1e-3`.
//! Offsets and coordinates are drawn away from the integer lattice, where
//! bilinear sampling is not differentiable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::loss::{decompose, total_loss, DecomposedTarget};
use crate::model::{
    CellOrder, HybridFusionBlock, Model, ModelConfig, RecurrentCell, ReconHead, Variant,
};
use crate::nn::layers::{ChannelFuse, OffsetEstimator, ResidualBlock, SqueezeExcite};
use crate::nn::param::{stream_rng, ParamStore};
use crate::nn::{bilinear_sample, bilinear_sample_grad};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const OP_THRESHOLD: f64 = 1e-4;
pub const E2E_THRESHOLD: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.threshold
    }
}

/// Relative error with a floor so that near-zero gradient pairs compare by
/// absolute difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Randomize every parameter of a store (gradcheck wants a generic point in
/// weight space, not the zero-initialized start).
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        let fan: usize = shape.iter().skip(1).product::<usize>().max(1);
        let bound = (1.0 / fan as f64).sqrt();
        *store.value_mut(id) = rand_tensor(rng, &shape, bound);
    }
}

type BuildFn<'a> =
    dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[NodeId]) -> crate::Result<Vec<NodeId>> + 'a;

/// Verify one tape-recorded operation: project its outputs to a scalar with
/// fixed random tensors, compare analytic gradients of all inputs and
/// parameters against central differences.
fn check_scenario(
    op: &'static str,
    threshold: f64,
    inputs: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    build: &BuildFn<'_>,
) -> CheckReport {
    // discover output shapes, then fix scalar projections
    let projections: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let outs = build(&mut tape, &store, &ids).expect("gradcheck forward");
        outs.iter()
            .map(|&o| rand_tensor(rng, tape.value(o).shape(), 1.0))
            .collect()
    };

    let scalarize = |vals: &[Tensor<f64>]| -> f64 {
        let mut store = clone_store(&store);
        let param_ids: Vec<_> = store.ids().collect();
        for (i, v) in vals[inputs.len()..].iter().enumerate() {
            *store.value_mut(param_ids[i]) = v.clone();
        }
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals[..inputs.len()]
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        let outs = build(&mut tape, &store, &ids).expect("gradcheck forward");
        let mut scalars = Vec::with_capacity(outs.len());
        for (&o, p) in outs.iter().zip(&projections) {
            let pr = tape.leaf(p.clone());
            scalars.push(tape.dot(o, pr).expect("projection"));
        }
        let total = tape.sum_scalars(&scalars).expect("sum");
        tape.value(total).item()
    };

    // analytic gradients at the base point
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let outs = build(&mut tape, &store, &ids).expect("gradcheck forward");
        let mut scalars = Vec::with_capacity(outs.len());
        for (&o, p) in outs.iter().zip(&projections) {
            let pr = tape.leaf(p.clone());
            scalars.push(tape.dot(o, pr).expect("projection"));
        }
        let total = tape.sum_scalars(&scalars).expect("sum");
        let grads = tape.backward(total).expect("backward");
        let mut result: Vec<Tensor<f64>> = ids
            .iter()
            .zip(&inputs)
            .map(|(&id, t)| match grads.node(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect();
        let param_grads = tape.param_grads(&store, &grads);
        for (id, g) in store.ids().zip(param_grads) {
            result.push(g.unwrap_or_else(|| Tensor::zeros(store.value(id).shape())));
        }
        result
    };

    // numeric gradients
    let mut values: Vec<Tensor<f64>> = inputs.clone();
    for (_, _, v) in store.iter() {
        values.push(v.clone());
    }
    let mut max_err = 0.0f64;
    for ti in 0..values.len() {
        for ei in 0..values[ti].len() {
            let orig = values[ti].data()[ei];
            values[ti].data_mut()[ei] = orig + FD_STEP;
            let fp = scalarize(&values);
            values[ti].data_mut()[ei] = orig - FD_STEP;
            let fm = scalarize(&values);
            values[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(analytic[ti].data()[ei], numeric));
        }
    }
    CheckReport {
        op,
        max_rel_err: max_err,
        threshold,
    }
}

fn clone_store(store: &ParamStore<f64>) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (_, name, value) in store.iter() {
        out.register(name.to_string(), value.clone());
    }
    out
}

fn check_bilinear_sample(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 1);
    let feature = rand_tensor(&mut rng, &[2, 4, 4], 1.0);
    let proj: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let mut max_err = 0.0f64;
    for _ in 0..6 {
        // keep clear of the integer lattice where the sampler has kinks
        let y = rng.gen_range(-0.8..4.3) + 0.101;
        let x = rng.gen_range(-0.8..4.3) + 0.103;
        let scalar = |f: &Tensor<f64>, yy: f64, xx: f64| -> f64 {
            bilinear_sample(f, yy, xx)
                .iter()
                .zip(&proj)
                .map(|(v, p)| v * p)
                .sum()
        };
        let (dy, dx, weights) = bilinear_sample_grad(&feature, y, x);
        let ana_dy: f64 = dy.iter().zip(&proj).map(|(v, p)| v * p).sum();
        let ana_dx: f64 = dx.iter().zip(&proj).map(|(v, p)| v * p).sum();
        let num_dy = (scalar(&feature, y + FD_STEP, x) - scalar(&feature, y - FD_STEP, x))
            / (2.0 * FD_STEP);
        let num_dx = (scalar(&feature, y, x + FD_STEP) - scalar(&feature, y, x - FD_STEP))
            / (2.0 * FD_STEP);
        max_err = max_err.max(relative_error(ana_dy, num_dy));
        max_err = max_err.max(relative_error(ana_dx, num_dx));

        // feature gradients: projection weight times corner weight
        let mut analytic = Tensor::<f64>::zeros(&[2, 4, 4]);
        for c in 0..2 {
            for &(yy, xx, w) in &weights {
                analytic.data_mut()[c * 16 + yy * 4 + xx] = proj[c] * w;
            }
        }
        let mut f = feature.clone();
        for ei in 0..f.len() {
            let orig = f.data()[ei];
            f.data_mut()[ei] = orig + FD_STEP;
            let fp = scalar(&f, y, x);
            f.data_mut()[ei] = orig - FD_STEP;
            let fm = scalar(&f, y, x);
            f.data_mut()[ei] = orig;
            max_err = max_err.max(relative_error(
                analytic.data()[ei],
                (fp - fm) / (2.0 * FD_STEP),
            ));
        }
    }
    CheckReport {
        op: "bilinear_sample",
        max_rel_err: max_err,
        threshold: OP_THRESHOLD,
    }
}

fn check_deform_conv(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 2);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[18, 4, 4], 1.3),
        rand_tensor(&mut rng, &[2, 2, 3, 3], 0.5),
        rand_tensor(&mut rng, &[2], 0.5),
    ];
    check_scenario(
        "deform_conv",
        OP_THRESHOLD,
        inputs,
        ParamStore::new(),
        &mut rng,
        &|tape, _, ids| Ok(vec![tape.deform_conv(ids[0], ids[1], ids[2], ids[3])?]),
    )
}

fn check_offset_estimator(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 3);
    let mut store = ParamStore::new();
    let layer = OffsetEstimator::new(&mut store, &mut rng, "est", 2, 3);
    randomize(&mut store, &mut rng);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
    ];
    check_scenario(
        "offset_estimator",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| Ok(vec![layer.forward(tape, store, ids[0], ids[1])?]),
    )
}

fn check_residual_block(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 4);
    let mut store = ParamStore::new();
    let layer = ResidualBlock::new(&mut store, &mut rng, "rb", 2, 3);
    let inputs = vec![rand_tensor(&mut rng, &[2, 4, 4], 1.0)];
    check_scenario(
        "residual_block",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| Ok(vec![layer.forward(tape, store, ids[0])?]),
    )
}

fn check_se_gate(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 5);
    let mut store = ParamStore::new();
    let layer = SqueezeExcite::new(&mut store, &mut rng, "se", 3);
    let inputs = vec![rand_tensor(&mut rng, &[3, 5, 5], 1.0)];
    check_scenario(
        "se_gate",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| Ok(vec![layer.forward(tape, store, ids[0])?]),
    )
}

fn check_fuse_1x1(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 6);
    let mut store = ParamStore::new();
    let layer = ChannelFuse::new(&mut store, &mut rng, "fuse", 7, 4);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[3, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
    ];
    check_scenario(
        "fuse_1x1",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| Ok(vec![layer.forward(tape, store, ids)?]),
    )
}

fn check_dfu(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 7);
    let mut store = ParamStore::new();
    let cell = RecurrentCell::new(
        &mut store,
        &mut rng,
        "cell",
        2,
        3,
        2,
        1,
        CellOrder::AlignThenFuse,
    );
    randomize(&mut store, &mut rng);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
    ];
    check_scenario(
        "dfu",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| {
            let a1 = cell.align_hidden(tape, store, 0, ids[0], ids[2])?;
            let a2 = cell.align_hidden(tape, store, 1, ids[1], ids[2])?;
            Ok(vec![a1, a2])
        },
    )
}

fn check_fru(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 8);
    let mut store = ParamStore::new();
    let unit = crate::model::FusionUnit::new(&mut store, &mut rng, "fru", 6, 2, 2, 3);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
    ];
    check_scenario(
        "fru",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| Ok(vec![unit.forward(tape, store, ids)?]),
    )
}

fn check_hfb(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 9);
    let mut store = ParamStore::new();
    let block = HybridFusionBlock::new(&mut store, &mut rng, "hfb", 3, 3);
    let inputs = vec![
        rand_tensor(&mut rng, &[3, 5, 5], 1.0),
        rand_tensor(&mut rng, &[3, 5, 5], 1.0),
        rand_tensor(&mut rng, &[3, 5, 5], 1.0),
    ];
    check_scenario(
        "hfb",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| {
            let (a, b, c) = block.forward(tape, store, ids[0], ids[1], ids[2])?;
            Ok(vec![a, b, c])
        },
    )
}

fn check_reconstruct(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 10);
    let mut store = ParamStore::new();
    let frame = ReconHead::new(&mut store, &mut rng, "recon.frame", 2, 3, 0.5);
    let structure = ReconHead::new(&mut store, &mut rng, "recon.structure", 2, 3, 0.5);
    let detail = ReconHead::new(&mut store, &mut rng, "recon.detail", 2, 3, 0.0);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
        rand_tensor(&mut rng, &[2, 4, 4], 1.0),
    ];
    check_scenario(
        "reconstruct",
        OP_THRESHOLD,
        inputs,
        store,
        &mut rng,
        &|tape, store, ids| {
            Ok(vec![
                frame.forward(tape, store, ids[0])?,
                structure.forward(tape, store, ids[1])?,
                detail.forward(tape, store, ids[2])?,
            ])
        },
    )
}

fn check_total_loss(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 11);
    let targets: Vec<DecomposedTarget<f64>> = (0..3)
        .map(|_| {
            let img = Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
            decompose(&img, 4).unwrap()
        })
        .collect();
    let inputs: Vec<Tensor<f64>> = (0..9)
        .map(|_| rand_tensor(&mut rng, &[3, 8, 8], 1.0))
        .collect();
    check_scenario(
        "total_loss",
        OP_THRESHOLD,
        inputs,
        ParamStore::new(),
        &mut rng,
        &move |tape, _, ids| {
            let loss = total_loss(
                tape,
                (&ids[0..3], &ids[3..6], &ids[6..9]),
                &targets,
            )?;
            Ok(vec![loss.total])
        },
    )
}

/// Sampled end-to-end gradient check: loss gradients for a random 1% of
/// parameters of a small full model against central differences.
pub fn end_to_end_check(seed: u64) -> CheckReport {
    let mut rng = stream_rng(seed, 12);
    let cfg = ModelConfig {
        channels: 4,
        frb_backward: 1,
        frb_forward: 1,
        hfb_count: 1,
        fe_resblocks: 1,
        variant: Variant::E,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg, seed).unwrap();
    randomize(&mut model.store, &mut rng);
    let lr_frames: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>()))
        .collect();
    let targets: Vec<DecomposedTarget<f64>> = (0..3)
        .map(|_| {
            let img = Tensor::from_fn(&[3, 32, 32], |_| rng.gen::<f64>());
            decompose(&img, 4).unwrap()
        })
        .collect();

    let eval = |model: &Model<f64>| -> (f64, Option<Vec<Option<Tensor<f64>>>>) {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &lr_frames).unwrap();
        let loss = total_loss(
            &mut tape,
            (&out.frames, &out.structures, &out.details),
            &targets,
        )
        .unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let param_grads = tape.param_grads(&model.store, &grads);
        (tape.value(loss.total).item(), Some(param_grads))
    };
    let eval_value = |model: &Model<f64>| -> f64 {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &lr_frames).unwrap();
        let loss = total_loss(
            &mut tape,
            (&out.frames, &out.structures, &out.details),
            &targets,
        )
        .unwrap();
        tape.value(loss.total).item()
    };

    let (_, analytic) = eval(&model);
    let analytic = analytic.unwrap();

    let total_scalars = model.store.scalar_count();
    let sample_count = (total_scalars / 100).max(30);
    let param_ids: Vec<_> = model.store.ids().collect();
    let mut max_err = 0.0f64;
    for _ in 0..sample_count {
        let pid = param_ids[rng.gen_range(0..param_ids.len())];
        let len = model.store.value(pid).len();
        let ei = rng.gen_range(0..len);
        let orig = model.store.value(pid).data()[ei];
        model.store.value_mut(pid).data_mut()[ei] = orig + FD_STEP;
        let fp = eval_value(&model);
        model.store.value_mut(pid).data_mut()[ei] = orig - FD_STEP;
        let fm = eval_value(&model);
        model.store.value_mut(pid).data_mut()[ei] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let ana = analytic[pid.index()]
            .as_ref()
            .map(|g| g.data()[ei])
            .unwrap_or(0.0);
        max_err = max_err.max(relative_error(ana, numeric));
    }
    CheckReport {
        op: "end_to_end",
        max_rel_err: max_err,
        threshold: E2E_THRESHOLD,
    }
}

/// Run every registered check. One report per operation.
pub fn run_suite(seed: u64) -> Vec<CheckReport> {
    vec![
        check_bilinear_sample(seed),
        check_deform_conv(seed),
        check_offset_estimator(seed),
        check_residual_block(seed),
        check_se_gate(seed),
        check_fuse_1x1(seed),
        check_dfu(seed),
        check_fru(seed),
        check_hfb(seed),
        check_reconstruct(seed),
        check_total_loss(seed),
        end_to_end_check(seed),
    ]
}
