//! Property tests over the invariants that hold for arbitrary inputs.

use proptest::prelude::*;
use yogo_core::data::{apply_flips, batch_indices, bicubic_resize};
use yogo_core::loss::charbonnier;
use yogo_core::nn::bilinear_sample;
use yogo_core::tape::Tape;
use yogo_core::tensor::Tensor;

fn tensor_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0f64..10.0, c * h * w)
        .prop_map(move |data| Tensor::new(vec![c, h, w], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_shuffle_round_trip(
        x in tensor_strategy(8, 3, 5),
    ) {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let up = tape.pixel_shuffle(xi, 2).unwrap();
        prop_assert_eq!(tape.value(up).shape(), &[2, 6, 10]);
        // shuffling the shuffled gradient back is the identity, checked via
        // a second tape op pair
        let mut tape2 = Tape::new();
        let yi = tape2.leaf(tape.value(up).clone());
        let down = tape2.pixel_shuffle(yi, 1).unwrap();
        prop_assert_eq!(tape2.value(down), tape.value(up));
    }

    #[test]
    fn charbonnier_even_and_floored(v in -50.0f64..50.0) {
        let pos = charbonnier(&Tensor::scalar(v)).item();
        let neg = charbonnier(&Tensor::scalar(-v)).item();
        prop_assert_eq!(pos, neg);
        prop_assert!(pos >= 1e-3);
        prop_assert!(pos >= v.abs());
    }

    #[test]
    fn out_of_bounds_sampling_is_zero(
        x in tensor_strategy(2, 4, 4),
        y in -30.0f64..-1.01,
        xx in -30.0f64..30.0,
    ) {
        // any coordinate below -1 has all four corners outside the image
        let sample = bilinear_sample(&x, y, xx);
        prop_assert!(sample.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flips_are_involutions(
        x in tensor_strategy(3, 6, 9),
        h in any::<bool>(),
        v in any::<bool>(),
        r in any::<bool>(),
    ) {
        let twice = apply_flips(&apply_flips(&x, h, v, r), h, v, r);
        prop_assert_eq!(twice, x);
    }

    #[test]
    fn resize_preserves_constants(c in 0.0f64..1.0, scale in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0])) {
        let img = Tensor::<f64>::full(&[3, 8, 8], c);
        let out = bicubic_resize(&img, scale, true).unwrap();
        for &v in out.data() {
            prop_assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_partition_without_repeats(
        n in 1usize..40,
        batch in 1usize..8,
        seed in any::<u64>(),
        epoch in 0u64..4,
    ) {
        let batches = batch_indices(n, batch, seed, epoch);
        prop_assert_eq!(batches.len(), n / batch);
        let mut seen = std::collections::HashSet::new();
        for b in &batches {
            prop_assert_eq!(b.len(), batch);
            for &i in b {
                prop_assert!(i < n);
                prop_assert!(seen.insert(i), "index {} repeated", i);
            }
        }
    }
}
