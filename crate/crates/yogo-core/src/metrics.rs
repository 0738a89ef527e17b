//! PSNR and SSIM evaluation plus model parameter accounting. Metric math
//! runs in `f64` regardless of the element type of the images.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

/// Which channels the metrics reduce over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// All channels pooled together.
    Rgb,
    /// Rec. 601 luma channel only.
    Luma601,
}

impl ChannelMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ChannelMode::Rgb),
            "luma601" => Ok(ChannelMode::Luma601),
            other => Err(Error::config(format!(
                "unknown channel_mode {other:?}, expected rgb or luma601"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelMode::Rgb => "rgb",
            ChannelMode::Luma601 => "luma601",
        }
    }
}

/// Per-frame and aggregate quality numbers for one sequence. Infinite PSNR
/// (identical frames) is kept as `f64::INFINITY` and excluded from the mean
/// with a warning.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_frame: Vec<(u32, f64, f64)>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub channel_mode: ChannelMode,
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<(u32, f64, f64)>, channel_mode: ChannelMode) -> Self {
        let finite: Vec<f64> = per_frame
            .iter()
            .map(|&(_, p, _)| p)
            .filter(|p| p.is_finite())
            .collect();
        if finite.len() != per_frame.len() {
            log::warn!(
                "{} frame(s) with infinite PSNR excluded from the mean",
                per_frame.len() - finite.len()
            );
        }
        let mean_psnr_db = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_ssim =
            per_frame.iter().map(|&(_, _, s)| s).sum::<f64>() / per_frame.len().max(1) as f64;
        MetricReport {
            per_frame,
            mean_psnr_db,
            mean_ssim,
            channel_mode,
        }
    }
}

fn to_planes<T: Scalar>(img: &Tensor<T>, mode: ChannelMode) -> Vec<Vec<f64>> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    match mode {
        ChannelMode::Rgb => (0..c)
            .map(|ci| img.plane(ci).iter().map(|v| v.as_f64()).collect())
            .collect(),
        ChannelMode::Luma601 => {
            debug_assert_eq!(c, 3, "luma conversion expects RGB");
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            vec![(0..h * w)
                .map(|i| 0.299 * r[i].as_f64() + 0.587 * g[i].as_f64() + 0.114 * b[i].as_f64())
                .collect()]
        }
    }
}

/// Peak signal-to-noise ratio in dB over all pixels (and channels in RGB
/// mode). Identical images give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, mode: ChannelMode) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "psnr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (to_planes(a, mode), to_planes(b, mode));
    let mut acc = 0.0;
    let mut count = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            let d = u - v;
            acc += d * d;
        }
        count += x.len();
    }
    let mse = acc / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    // valid window positions only
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                let y = cy + dy - half;
                for dx in 0..SSIM_WINDOW {
                    let x = cx + dx - half;
                    let wgt = win[dy] * win[dx];
                    let (u, v) = (a[y * w + x], b[y * w + x]);
                    mu_a += wgt * u;
                    mu_b += wgt * v;
                    aa += wgt * u * u;
                    bb += wgt * v * v;
                    ab += wgt * u * v;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over valid window positions and channels.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: ChannelMode) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (_, h, w) = a.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let (pa, pb) = (to_planes(a, mode), to_planes(b, mode));
    let mut acc = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        acc += ssim_plane(x, y, h, w);
    }
    Ok(acc / pa.len() as f64)
}

/// Exact count of trainable scalars for a configuration, with per-component
/// subtotals. Pure function of the configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<(usize, Vec<(String, usize)>)> {
    let model = Model::<f64>::new(cfg.clone(), 0)?;
    Ok((model.store.scalar_count(), model.param_breakdown()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::stream_rng;
    use rand::Rng;

    #[test]
    fn psnr_uniform_offset_closed_form() {
        let a = Tensor::<f64>::full(&[3, 8, 8], 0.2);
        let b = Tensor::<f64>::full(&[3, 8, 8], 0.3);
        let got = psnr(&a, &b, 1.0, ChannelMode::Rgb).unwrap();
        assert!((got - 20.0).abs() <= 1e-6, "{got}");
    }

    #[test]
    fn psnr_identity_is_infinite() {
        let a = Tensor::<f64>::full(&[3, 8, 8], 0.4);
        assert!(psnr(&a, &a, 1.0, ChannelMode::Rgb).unwrap().is_infinite());
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        let mut rng = stream_rng(1, 0);
        let a = Tensor::<f64>::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
        let b = Tensor::<f64>::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
        let got = psnr(&a, &b, 1.0, ChannelMode::Rgb).unwrap();
        let mut acc = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            acc += (x - y) * (x - y);
        }
        let want = 10.0 * (1.0 / (acc / a.len() as f64)).log10();
        assert!((got - want).abs() / want.abs() <= 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[3, 8, 8]);
        let b = Tensor::<f64>::zeros(&[3, 8, 9]);
        assert!(psnr(&a, &b, 1.0, ChannelMode::Rgb).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = stream_rng(2, 0);
        let base = Tensor::<f64>::from_fn(&[3, 16, 16], |_| 0.3 + 0.4 * rng.gen::<f64>());
        let noise: Vec<f64> = (0..base.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut noisy = base.clone();
            for (v, n) in noisy.data_mut().iter_mut().zip(&noise) {
                *v = (*v + amp * n).clamp(0.0, 1.0);
            }
            let p = psnr(&base, &noisy, 1.0, ChannelMode::Rgb).unwrap();
            assert!(p < last, "psnr must fall as amplitude grows");
            last = p;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = stream_rng(3, 0);
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |_| rng.gen::<f64>());
        let got = ssim(&a, &a, ChannelMode::Rgb).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        let (c1, c2) = (0.2, 0.4);
        let a = Tensor::<f64>::full(&[3, 16, 16], c1);
        let b = Tensor::<f64>::full(&[3, 16, 16], c2);
        let got = ssim(&a, &b, ChannelMode::Rgb).unwrap();
        let want = (2.0 * c1 * c2 + SSIM_C1) * SSIM_C2 / ((c1 * c1 + c2 * c2 + SSIM_C1) * SSIM_C2);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = stream_rng(4, 0);
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |_| rng.gen::<f64>());
        let mut b = a.clone();
        for v in b.data_mut().iter_mut().step_by(7) {
            *v = (*v + 0.3).min(1.0);
        }
        let ab = ssim(&a, &b, ChannelMode::Rgb).unwrap();
        let ba = ssim(&b, &a, ChannelMode::Rgb).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
        assert!(ab < 1.0);
        assert!(ab >= -1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[3, 8, 8]);
        assert!(ssim(&a, &a, ChannelMode::Rgb).is_err());
    }

    #[test]
    fn luma_matches_rgb_on_gray_images() {
        let mut rng = stream_rng(5, 0);
        let gray: Vec<f64> = (0..16 * 16).map(|_| rng.gen()).collect();
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| gray[i % (16 * 16)]);
        let mut b = a.clone();
        for v in b.data_mut().iter_mut().step_by(5) {
            *v = (*v * 0.9 + 0.05).clamp(0.0, 1.0);
        }
        // keep b gray-replicated: rebuild from its own first plane
        let b0: Vec<f64> = b.plane(0).to_vec();
        let b = Tensor::<f64>::from_fn(&[3, 16, 16], |i| b0[i % (16 * 16)]);

        let p_rgb = psnr(&a, &b, 1.0, ChannelMode::Rgb).unwrap();
        let p_luma = psnr(&a, &b, 1.0, ChannelMode::Luma601).unwrap();
        assert!((p_rgb - p_luma).abs() <= 1e-9);
        let s_rgb = ssim(&a, &b, ChannelMode::Rgb).unwrap();
        let s_luma = ssim(&a, &b, ChannelMode::Luma601).unwrap();
        assert!((s_rgb - s_luma).abs() <= 1e-9);
    }

    #[test]
    fn infinite_psnr_excluded_from_report_mean() {
        let report = MetricReport::from_frames(
            vec![(1, 20.0, 0.9), (2, f64::INFINITY, 1.0), (3, 30.0, 0.95)],
            ChannelMode::Rgb,
        );
        assert!((report.mean_psnr_db - 25.0).abs() < 1e-12);
    }

    #[test]
    fn param_count_determinism_and_width_scaling() {
        let cfg = ModelConfig {
            channels: 16,
            frb_backward: 2,
            frb_forward: 3,
            hfb_count: 3,
            ..ModelConfig::default()
        };
        let (a, breakdown) = param_count(&cfg).unwrap();
        let (b, _) = param_count(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(breakdown.iter().map(|(_, n)| n).sum::<usize>(), a);

        let wide = ModelConfig {
            channels: 32,
            ..cfg.clone()
        };
        let (c, _) = param_count(&wide).unwrap();
        let ratio = c as f64 / a as f64;
        assert!((3.0..4.2).contains(&ratio), "width scaling ratio {ratio}");
    }
}
