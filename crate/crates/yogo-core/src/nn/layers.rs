//! Parameterized layers. Each struct owns handles into a [`ParamStore`] and
//! replays itself onto a [`Tape`]; weight sharing falls out of reusing the
//! same layer at several call sites.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::param::{conv_bound, uniform_tensor, ParamId, ParamStore};
use crate::nn::LEAKY_SLOPE;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Stride-1, zero-padded square convolution.
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let bound = conv_bound(c_in * k * k);
        let weight = store.register(
            format!("{name}.weight"),
            uniform_tensor(rng, &[c_out, c_in, k, k], bound),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv2d { weight, bias }
    }

    /// All-zero weights and bias; the identity point for offset estimators.
    pub fn new_zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, k, k]));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv2d { weight, bias }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b)
    }
}

/// Weights for one deformable convolution (the offsets arrive separately).
pub struct DeformConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DeformConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let bound = conv_bound(c_in * k * k);
        let weight = store.register(
            format!("{name}.weight"),
            uniform_tensor(rng, &[c_out, c_in, k, k], bound),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        DeformConv2d { weight, bias }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        offsets: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.deform_conv(x, offsets, w, b)
    }
}

/// Predicts a `[2K^2, H, W]` offset field from two stacked feature maps:
/// Conv3x3(2C->C) -> LeakyReLU -> Conv3x3(C->C) -> LeakyReLU -> Conv3x3(C->2K^2).
/// The last layer starts at zero so training begins from identity alignment.
pub struct OffsetEstimator {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl OffsetEstimator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        OffsetEstimator {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), 2 * channels, channels, k),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, k),
            conv3: Conv2d::new_zeroed(store, &format!("{name}.conv3"), channels, 2 * k * k, k),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        if !tape.value(a).same_shape(tape.value(b)) {
            return Err(crate::error::Error::shape(format!(
                "offset estimator inputs {:?} vs {:?}",
                tape.value(a).shape(),
                tape.value(b).shape()
            )));
        }
        let cat = tape.concat_channels(&[a, b])?;
        let h = self.conv1.forward(tape, store, cat)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.conv3.forward(tape, store, h)
    }
}

/// Two-conv branch `Conv3x3 -> LeakyReLU -> Conv3x3` used both with and
/// without the skip connection.
pub struct ResidualBranch {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, k);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, k);
        // start each branch near zero so deep residual stacks and the
        // recurrence stay at the input scale
        store.value_mut(conv2.weight).scale(T::from_f64(0.1));
        ResidualBranch { conv1, conv2 }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.conv2.forward(tape, store, h)
    }
}

/// Channel-preserving residual block without normalization:
/// `x + Conv3x3(LeakyReLU(Conv3x3(x)))`.
pub struct ResidualBlock {
    branch: ResidualBranch,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        ResidualBlock {
            branch: ResidualBranch::new(store, rng, name, channels, k),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let r = self.branch.forward(tape, store, x)?;
        tape.add(x, r)
    }
}

/// Squeeze-and-excitation gate: global average pool, a bottleneck MLP of
/// width `max(4, C/16)`, sigmoid. Returns the `[C]` gate only; callers choose
/// what it multiplies.
pub struct SqueezeExcite {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SqueezeExcite {
    pub fn hidden_width(channels: usize) -> usize {
        (channels / 16).max(4)
    }

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let hidden = Self::hidden_width(channels);
        let bound1 = (1.0 / channels as f64).sqrt();
        let bound2 = (1.0 / hidden as f64).sqrt();
        SqueezeExcite {
            w1: store.register(
                format!("{name}.fc1.weight"),
                uniform_tensor(rng, &[hidden, channels], bound1),
            ),
            b1: store.register(format!("{name}.fc1.bias"), Tensor::zeros(&[hidden])),
            w2: store.register(
                format!("{name}.fc2.weight"),
                uniform_tensor(rng, &[channels, hidden], bound2),
            ),
            b2: store.register(format!("{name}.fc2.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let pooled = tape.avg_pool_all(x)?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let h = tape.linear(pooled, w1, b1)?;
        let h = tape.relu(h);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.linear(h, w2, b2)?;
        Ok(tape.sigmoid(h))
    }
}

/// Concatenate along channels and fuse with a 1x1 convolution.
pub struct ChannelFuse {
    conv: Conv2d,
}

impl ChannelFuse {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in_total: usize,
        c_out: usize,
    ) -> Self {
        ChannelFuse {
            conv: Conv2d::new(store, rng, name, c_in_total, c_out, 1),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        parts: &[NodeId],
    ) -> Result<NodeId> {
        let cat = tape.concat_channels(parts)?;
        self.conv.forward(tape, store, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::stream_rng;
    use crate::tensor::gemm;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn offset_estimator_starts_at_zero_offsets() {
        let mut rng = stream_rng(1, 0);
        let mut store = ParamStore::<f64>::new();
        let est = OffsetEstimator::new(&mut store, &mut rng, "est", 4, 3);
        let mut tape = Tape::new();
        let a = tape.leaf(rand_tensor(&mut rng, &[4, 8, 8]));
        let b = tape.leaf(rand_tensor(&mut rng, &[4, 8, 8]));
        let off = est.forward(&mut tape, &store, a, b).unwrap();
        assert_eq!(tape.value(off).shape(), &[18, 8, 8]);
        assert!(tape.value(off).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offset_estimator_rejects_shape_mismatch() {
        let mut rng = stream_rng(2, 0);
        let mut store = ParamStore::<f64>::new();
        let est = OffsetEstimator::new(&mut store, &mut rng, "est", 4, 3);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[4, 8, 8]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[4, 6, 8]));
        assert!(est.forward(&mut tape, &store, a, b).is_err());
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let mut rng = stream_rng(3, 0);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 3, 3);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let x = rand_tensor(&mut rng, &[3, 5, 5]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &store, xi).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn residual_block_matches_explicit_composition() {
        // compose the two convolutions and the skip by hand
        let mut rng = stream_rng(4, 0);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 2, 3);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);

        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = block.forward(&mut tape, &store, xi).unwrap();

        let w1 = store.value(store.find("rb.conv1.weight").unwrap());
        let b1 = store.value(store.find("rb.conv1.bias").unwrap());
        let w2 = store.value(store.find("rb.conv2.weight").unwrap());
        let b2 = store.value(store.find("rb.conv2.bias").unwrap());
        let mut oracle_tape = Tape::new();
        let xo = oracle_tape.leaf(x.clone());
        let w1n = oracle_tape.leaf(w1.clone());
        let b1n = oracle_tape.leaf(b1.clone());
        let c1 = oracle_tape.conv2d(xo, w1n, b1n).unwrap();
        let a1 = oracle_tape.leaky_relu(c1, LEAKY_SLOPE);
        let w2n = oracle_tape.leaf(w2.clone());
        let b2n = oracle_tape.leaf(b2.clone());
        let c2 = oracle_tape.conv2d(a1, w2n, b2n).unwrap();
        let want = {
            let mut t = oracle_tape.value(c2).clone();
            t.add_assign(&x);
            t
        };
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn se_gate_range_and_zero_init_value() {
        let mut rng = stream_rng(5, 0);
        let mut store = ParamStore::<f64>::new();
        let se = SqueezeExcite::new(&mut store, &mut rng, "se", 8);
        let x = rand_tensor(&mut rng, &[8, 6, 6]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let gate = se.forward(&mut tape, &store, xi).unwrap();
        assert_eq!(tape.value(gate).shape(), &[8]);
        for &v in tape.value(gate).data() {
            assert!(v > 0.0 && v < 1.0, "gate out of (0,1): {v}");
        }

        // zero final layer -> sigmoid(0) = 0.5 exactly
        let shape = store.value(se.w2).shape().to_vec();
        *store.value_mut(se.w2) = Tensor::zeros(&shape);
        let mut tape = Tape::new();
        let xi = tape.leaf(rand_tensor(&mut rng, &[8, 6, 6]));
        let gate = se.forward(&mut tape, &store, xi).unwrap();
        for &v in tape.value(gate).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn se_gate_invariant_under_spatial_permutation() {
        let mut rng = stream_rng(6, 0);
        let mut store = ParamStore::<f64>::new();
        let se = SqueezeExcite::new(&mut store, &mut rng, "se", 4);
        let x = rand_tensor(&mut rng, &[4, 4, 4]);

        // random spatial permutation applied identically per channel
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled = Tensor::<f64>::from_fn(&[4, 4, 4], |i| {
            let (c, p) = (i / 16, i % 16);
            x.data()[c * 16 + perm[p]]
        });

        let gate_of = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let xi = tape.leaf(input);
            let g = se.forward(&mut tape, &store, xi).unwrap();
            tape.value(g).clone()
        };
        let (ga, gb) = (gate_of(x), gate_of(shuffled));
        assert!(ga.max_abs_diff(&gb) <= 1e-12);
    }

    #[test]
    fn se_hidden_width_is_clamped() {
        assert_eq!(SqueezeExcite::hidden_width(8), 4);
        assert_eq!(SqueezeExcite::hidden_width(56), 4);
        assert_eq!(SqueezeExcite::hidden_width(64), 4);
        assert_eq!(SqueezeExcite::hidden_width(256), 16);
    }

    #[test]
    fn fuse_identity_weights_select_first_part() {
        let mut rng = stream_rng(7, 0);
        let mut store = ParamStore::<f64>::new();
        let fuse = ChannelFuse::new(&mut store, &mut rng, "fuse", 5, 2);
        // first 2x2 block = identity, remaining input channels zeroed
        let mut w = Tensor::<f64>::zeros(&[2, 5, 1, 1]);
        w.data_mut()[0] = 1.0; // out 0 <- in 0
        w.data_mut()[5 + 1] = 1.0; // out 1 <- in 1
        *store.value_mut(fuse.conv.weight) = w;
        let a = rand_tensor(&mut rng, &[2, 4, 4]);
        let b = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut tape = Tape::new();
        let ai = tape.leaf(a.clone());
        let bi = tape.leaf(b);
        let y = fuse.forward(&mut tape, &store, &[ai, bi]).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn fuse_matches_per_pixel_matmul_oracle() {
        let mut rng = stream_rng(8, 0);
        let mut store = ParamStore::<f64>::new();
        let fuse = ChannelFuse::new(&mut store, &mut rng, "fuse", 5, 3);
        let a = rand_tensor(&mut rng, &[2, 4, 4]);
        let b = rand_tensor(&mut rng, &[3, 4, 4]);
        let mut tape = Tape::new();
        let ai = tape.leaf(a.clone());
        let bi = tape.leaf(b.clone());
        let y = fuse.forward(&mut tape, &store, &[ai, bi]).unwrap();

        let w = store.value(fuse.conv.weight);
        let bias = store.value(fuse.conv.bias);
        let mut want = Tensor::<f64>::zeros(&[3, 4, 4]);
        for p in 0..16 {
            let stacked: Vec<f64> = (0..2)
                .map(|c| a.plane(c)[p])
                .chain((0..3).map(|c| b.plane(c)[p]))
                .collect();
            for co in 0..3 {
                let row = &w.data()[co * 5..(co + 1) * 5];
                let mut acc = bias.data()[co];
                for (wv, xv) in row.iter().zip(&stacked) {
                    acc += wv * xv;
                }
                want.data_mut()[co * 16 + p] = acc;
            }
        }
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn fuse_rejects_spatial_mismatch() {
        let mut rng = stream_rng(9, 0);
        let mut store = ParamStore::<f64>::new();
        let fuse = ChannelFuse::new(&mut store, &mut rng, "fuse", 4, 2);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 4, 4]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[2, 4, 5]));
        assert!(fuse.forward(&mut tape, &store, &[a, b]).is_err());
    }

    #[test]
    fn conv_gemm_path_consistent_with_plain_gemm() {
        // 1x1 convolution is exactly a per-pixel GEMM
        let mut rng = stream_rng(10, 0);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 1, 1]);
        let b = Tensor::<f64>::zeros(&[2]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let bi = tape.leaf(b);
        let y = tape.conv2d(xi, wi, bi).unwrap();
        let mut want = vec![0.0; 2 * 16];
        gemm(2, 3, 16, w.data(), x.data(), 0.0, &mut want);
        assert!(tape
            .value(y)
            .max_abs_diff(&Tensor::new(vec![2, 4, 4], want).unwrap())
            <= 1e-12);
    }
}
