//! Criterion benchmarks for the hot paths: convolution, deformable
//! convolution, the bicubic resampler and a whole forward/backward step at
//! the toy training scale.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use yogo_core::data::{bicubic_resize, synth_generate};
use yogo_core::loss::total_loss;
use yogo_core::model::{Model, ModelConfig, Variant};
use yogo_core::tape::Tape;
use yogo_core::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen::<f32>() * 2.0 - 1.0)
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[16, 64, 64]);
    let w = rand_tensor(&mut rng, &[16, 16, 3, 3]);
    let b = rand_tensor(&mut rng, &[16]);
    c.bench_function("conv3x3_16c_64px_f32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            tape.conv2d(xi, wi, bi).unwrap()
        })
    });
}

fn bench_deform(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[16, 16, 16]);
    let off = rand_tensor(&mut rng, &[18, 16, 16]);
    let w = rand_tensor(&mut rng, &[16, 16, 3, 3]);
    let b = rand_tensor(&mut rng, &[16]);
    c.bench_function("deform_conv_16c_16px_f32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let oi = tape.leaf(off.clone());
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            tape.deform_conv(xi, oi, wi, bi).unwrap()
        })
    });
}

fn bench_bicubic(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::<f32>::from_fn(&[3, 64, 64], |_| rng.gen());
    c.bench_function("bicubic_down4_64px", |bench| {
        bench.iter(|| bicubic_resize(&img, 0.25, true).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        channels: 16,
        frb_backward: 2,
        frb_forward: 3,
        hfb_count: 3,
        variant: Variant::E,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg, 5).unwrap();
    let seq = synth_generate::<f32>(9, 1, 64, 64).unwrap().pop().unwrap();
    let sample = yogo_core::data::degrade(&seq).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("forward_backward_toy_sample", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &sample.lr_inputs).unwrap();
            let loss = total_loss(
                &mut tape,
                (&out.frames, &out.structures, &out.details),
                &sample.hr_targets,
            )
            .unwrap();
            tape.backward(loss.total).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_deform, bench_bicubic, bench_train_step);
criterion_main!(benches);
