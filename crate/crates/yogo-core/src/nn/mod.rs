//! Differentiable building blocks with fixed conventions.
//!
//! Everything here is a pure function of its inputs plus immutable
//! parameters: zero-padded bilinear sampling, deformable convolution with one
//! group and stride 1, a three-conv offset estimator whose last layer starts
//! at zero, plain residual blocks without normalization, squeeze-excite
//! channel gates, sub-pixel (pixel-shuffle) rearrangement and 1x1 channel
//! fusion. Offset fields store `(dy, dx)` pairs per kernel tap, taps in
//! row-major kernel order. The leaky-rectifier slope is 0.1 throughout.

pub mod layers;
pub mod param;

use crate::tensor::{Scalar, Tensor};

/// Negative slope used by every leaky rectifier in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Charbonnier smoothing constant.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Bilinear lookup of all channels of `feature` at continuous coordinates
/// `(y, x)`, pixel centers at integers. Neighbors outside
/// `[0, H-1] x [0, W-1]` contribute zero.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, y: f64, x: f64) -> Vec<T> {
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let y0 = y.floor();
    let x0 = x.floor();
    let wy1 = y - y0;
    let wx1 = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let fetch = |plane: &[T], yy: isize, xx: isize| -> T {
        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
            T::zero()
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let w00 = T::from_f64((1.0 - wy1) * (1.0 - wx1));
    let w01 = T::from_f64((1.0 - wy1) * wx1);
    let w10 = T::from_f64(wy1 * (1.0 - wx1));
    let w11 = T::from_f64(wy1 * wx1);
    (0..c)
        .map(|ci| {
            let p = feature.plane(ci);
            w00 * fetch(p, y0, x0)
                + w01 * fetch(p, y0, x0 + 1)
                + w10 * fetch(p, y0 + 1, x0)
                + w11 * fetch(p, y0 + 1, x0 + 1)
        })
        .collect()
}

/// Analytic derivatives of [`bilinear_sample`]: per-channel sensitivities to
/// the two coordinates, plus the weights of the four source pixels as
/// `(y, x, weight)` triples (out-of-range corners omitted).
pub fn bilinear_sample_grad<T: Scalar>(
    feature: &Tensor<T>,
    y: f64,
    x: f64,
) -> (Vec<f64>, Vec<f64>, Vec<(usize, usize, f64)>) {
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let y0f = y.floor();
    let x0f = x.floor();
    let wy1 = y - y0f;
    let wx1 = x - x0f;
    let (y0, x0) = (y0f as isize, x0f as isize);
    let fetch = |plane: &[T], yy: isize, xx: isize| -> f64 {
        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize].as_f64()
        }
    };
    let mut dy = Vec::with_capacity(c);
    let mut dx = Vec::with_capacity(c);
    for ci in 0..c {
        let p = feature.plane(ci);
        let v00 = fetch(p, y0, x0);
        let v01 = fetch(p, y0, x0 + 1);
        let v10 = fetch(p, y0 + 1, x0);
        let v11 = fetch(p, y0 + 1, x0 + 1);
        dy.push((1.0 - wx1) * (v10 - v00) + wx1 * (v11 - v01));
        dx.push((1.0 - wy1) * (v01 - v00) + wy1 * (v11 - v10));
    }
    let mut weights = Vec::new();
    for (oy, ox, wgt) in [
        (0, 0, (1.0 - wy1) * (1.0 - wx1)),
        (0, 1, (1.0 - wy1) * wx1),
        (1, 0, wy1 * (1.0 - wx1)),
        (1, 1, wy1 * wx1),
    ] {
        let yy = y0 + oy;
        let xx = x0 + ox;
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            weights.push((yy as usize, xx as usize, wgt));
        }
    }
    (dy, dx, weights)
}
