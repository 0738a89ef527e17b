//! Data pipeline: bit-exact bicubic resampling, LR degradation, septuplet
//! folder ingestion, synthetic sequence generation, augmentation and
//! deterministic batching.
//!
//! The resampler uses the cubic convolution kernel with `a = -0.5`,
//! separable row/column passes, per-output-pixel weight renormalization over
//! in-bounds taps, antialias support widening on downscale, and a final
//! clamp to `[0, 1]`. Everything downstream (degradation, the
//! structure/detail decomposition, evaluation baselines) shares this one
//! implementation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{decompose, DecomposedTarget};
use crate::nn::param::stream_rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionTag {
    Hr,
    Lr,
}

/// Ordered RGB frames in `[0, 1]` with 1-based temporal indices.
#[derive(Debug, Clone)]
pub struct FrameSequence<T> {
    pub frames: Vec<Tensor<T>>,
    pub indices: Vec<u32>,
    pub tag: ResolutionTag,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, tag: ResolutionTag) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::data("frame sequence is empty"));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!(
                "frames must be [3,H,W], got {shape:?}"
            )));
        }
        for f in &frames {
            if f.shape() != shape {
                return Err(Error::shape("frames differ in shape"));
            }
        }
        let indices = (1..=frames.len() as u32).collect();
        Ok(FrameSequence {
            frames,
            indices,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }
}

/// Four LR input frames plus seven decomposed supervision targets.
pub struct TrainSample<T> {
    pub lr_inputs: Vec<Tensor<T>>,
    pub hr_targets: Vec<DecomposedTarget<T>>,
}

// --- bicubic resampler -------------------------------------------------------

/// Cubic convolution kernel, `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Tap window and renormalized weights for every output index of one axis.
struct AxisPlan {
    taps: Vec<(usize, Vec<f64>)>,
}

fn axis_plan(in_len: usize, out_len: usize, antialias: bool) -> AxisPlan {
    let scale = out_len as f64 / in_len as f64;
    let filter_scale = if antialias && scale < 1.0 { scale } else { 1.0 };
    let radius = 2.0 / filter_scale;
    let taps = (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) / scale - 0.5;
            let lo = ((src - radius).ceil() as isize).max(0) as usize;
            let hi = ((src + radius).floor() as isize).min(in_len as isize - 1) as usize;
            let mut weights: Vec<f64> = (lo..=hi)
                .map(|j| cubic((j as f64 - src) * filter_scale))
                .collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            (lo, weights)
        })
        .collect();
    AxisPlan { taps }
}

fn resize_axis_w(img: &Tensor<f64>, plan: &AxisPlan) -> Tensor<f64> {
    let (c, h, w_in) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let w_out = plan.taps.len();
    let mut out = Tensor::zeros(&[c, h, w_out]);
    for ci in 0..c {
        let src = img.plane(ci);
        let dst = &mut out.data_mut()[ci * h * w_out..(ci + 1) * h * w_out];
        for y in 0..h {
            let row = &src[y * w_in..(y + 1) * w_in];
            for (x, (lo, weights)) in plan.taps.iter().enumerate() {
                let mut acc = 0.0;
                for (k, &wgt) in weights.iter().enumerate() {
                    acc += wgt * row[lo + k];
                }
                dst[y * w_out + x] = acc;
            }
        }
    }
    out
}

fn resize_axis_h(img: &Tensor<f64>, plan: &AxisPlan) -> Tensor<f64> {
    let (c, _h_in, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let h_out = plan.taps.len();
    let mut out = Tensor::zeros(&[c, h_out, w]);
    for ci in 0..c {
        let src = img.plane(ci);
        let dst = &mut out.data_mut()[ci * h_out * w..(ci + 1) * h_out * w];
        for (y, (lo, weights)) in plan.taps.iter().enumerate() {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wgt) in weights.iter().enumerate() {
                    acc += wgt * src[(lo + k) * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

fn out_dim(in_len: usize, scale: f64) -> Result<usize> {
    if scale <= 0.0 {
        return Err(Error::config(format!("resize scale must be > 0, got {scale}")));
    }
    let out = (in_len as f64 * scale).round() as usize;
    if out == 0 {
        return Err(Error::config(format!(
            "resize of {in_len} by {scale} yields zero output dimension"
        )));
    }
    Ok(out)
}

/// Separable resize without the final clamp; `cols_first` flips the pass
/// order so tests can compare the two compositions.
pub fn resize_2d<T: Scalar>(
    img: &Tensor<T>,
    scale: f64,
    antialias: bool,
    cols_first: bool,
) -> Result<Tensor<T>> {
    let (_, h, w) = img.chw()?;
    let out_h = out_dim(h, scale)?;
    let out_w = out_dim(w, scale)?;
    if (out_h, out_w) == (h, w) && scale == 1.0 {
        return Ok(img.clone());
    }
    let wide: Tensor<f64> = img.cast();
    let plan_h = axis_plan(h, out_h, antialias);
    let plan_w = axis_plan(w, out_w, antialias);
    let resized = if cols_first {
        resize_axis_w(&resize_axis_h(&wide, &plan_h), &plan_w)
    } else {
        resize_axis_h(&resize_axis_w(&wide, &plan_w), &plan_h)
    };
    Ok(resized.cast())
}

/// Bicubic resize clamped to `[0, 1]`. `scale = 1` is the bit-exact identity.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, scale: f64, antialias: bool) -> Result<Tensor<T>> {
    let out = resize_2d(img, scale, antialias, false)?;
    Ok(out.map(|v| v.max(T::zero()).min(T::one())))
}

// --- degradation -------------------------------------------------------------

/// Build one training sample from a seven-frame HR sequence: the odd-indexed
/// four frames (1-based 1,3,5,7) become the LR inputs, every frame becomes a
/// decomposed supervision target.
pub fn degrade<T: Scalar>(hr: &FrameSequence<T>) -> Result<TrainSample<T>> {
    if hr.len() != 7 {
        return Err(Error::data(format!(
            "degrade expects a 7-frame sequence, got {}",
            hr.len()
        )));
    }
    if hr.height() % 4 != 0 || hr.width() % 4 != 0 {
        return Err(Error::data(format!(
            "degrade needs dimensions divisible by 4, got {}x{}",
            hr.height(),
            hr.width()
        )));
    }
    let lr_inputs = [0usize, 2, 4, 6]
        .iter()
        .map(|&i| bicubic_resize(&hr.frames[i], 0.25, true))
        .collect::<Result<Vec<_>>>()?;
    let hr_targets = hr
        .frames
        .iter()
        .map(|f| decompose(f, 4))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSample {
        lr_inputs,
        hr_targets,
    })
}

// --- ingestion ---------------------------------------------------------------

/// Iterator over septuplet folders `<root>/<seq_id>/im{1..7}.png` in
/// lexicographic folder order. Folders with missing frame files are skipped
/// with a warning; undecodable images abort with an error naming the path.
pub struct Ingest<T> {
    dirs: std::vec::IntoIter<PathBuf>,
    _marker: std::marker::PhantomData<T>,
}

pub fn ingest<T: Scalar>(root: &Path) -> Result<Ingest<T>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(Ingest {
        dirs: dirs.into_iter(),
        _marker: std::marker::PhantomData,
    })
}

impl<T: Scalar> Iterator for Ingest<T> {
    type Item = Result<FrameSequence<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        'dirs: for dir in self.dirs.by_ref() {
            let paths: Vec<PathBuf> = (1..=7).map(|i| dir.join(format!("im{i}.png"))).collect();
            for p in &paths {
                if !p.exists() {
                    log::warn!("skipping {}: missing {}", dir.display(), p.display());
                    continue 'dirs;
                }
            }
            let mut frames = Vec::with_capacity(7);
            for p in &paths {
                match load_png(p) {
                    Ok(f) => frames.push(f),
                    Err(e) => return Some(Err(e)),
                }
            }
            return Some(FrameSequence::new(frames, ResolutionTag::Hr));
        }
        None
    }
}

/// Eager variant of [`ingest`] that keeps the folder name of each sequence.
pub fn ingest_named<T: Scalar>(root: &Path) -> Result<Vec<(String, FrameSequence<T>)>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    'dirs: for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let paths: Vec<PathBuf> = (1..=7).map(|i| dir.join(format!("im{i}.png"))).collect();
        for p in &paths {
            if !p.exists() {
                log::warn!("skipping {}: missing {}", dir.display(), p.display());
                continue 'dirs;
            }
        }
        let mut frames = Vec::with_capacity(7);
        for p in &paths {
            frames.push(load_png(p)?);
        }
        out.push((name, FrameSequence::new(frames, ResolutionTag::Hr)?));
    }
    Ok(out)
}

/// 8-bit RGB PNG to a `[3,H,W]` tensor in `[0,1]` (values divided by 255).
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.data_mut()[c * h * w + y * w + x] = T::from_f64(px.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Quantize to 8-bit RGB and write a PNG.
pub fn save_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("save_png expects [3,H,W], got {c} channels")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ci| {
                let v = img.data()[ci * h * w + y * w + x].as_f64();
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// Export a sequence as `im1.png ... im7.png` under `dir`.
pub fn export_sequence<T: Scalar>(dir: &Path, seq: &FrameSequence<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        save_png(&dir.join(format!("im{}.png", i + 1)), frame)?;
    }
    Ok(())
}

// --- synthetic sequences -------------------------------------------------------

/// One oriented sinusoid of the analytic scene model.
#[derive(Debug, Clone)]
struct Wave {
    freq: f64,
    dir: (f64, f64),
    phase: f64,
    amp: f64,
    /// Per-channel gains keep the channels correlated but distinct.
    gains: [f64; 3],
}

/// Analytic moving scene: a sum of oriented sinusoids plus a smooth
/// low-frequency texture, rigidly translated and slowly rotated over time.
/// Frames are exact evaluations of the continuous model, so every
/// intermediate frame is ground truth by construction.
#[derive(Debug, Clone)]
pub struct MotionPattern {
    waves: Vec<Wave>,
    pub velocity: (f64, f64),
    pub spin: f64,
}

impl MotionPattern {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let n_detail = rng.gen_range(3..=6);
        let n_texture = 4;
        let mut waves = Vec::with_capacity(n_detail + n_texture);
        for i in 0..n_detail + n_texture {
            let freq = if i < n_detail {
                rng.gen_range(0.05..0.16)
            } else {
                rng.gen_range(0.004..0.03)
            };
            let angle = rng.gen_range(0.0..PI);
            waves.push(Wave {
                freq,
                dir: (angle.cos(), angle.sin()),
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: rng.gen_range(0.5..1.0),
                gains: [
                    rng.gen_range(0.6..1.0),
                    rng.gen_range(0.6..1.0),
                    rng.gen_range(0.6..1.0),
                ],
            });
        }
        // keep every channel inside [0.05, 0.95]
        let total: f64 = waves.iter().map(|w| w.amp).sum();
        for w in &mut waves {
            w.amp *= 0.45 / total;
        }
        let speed = rng.gen_range(0.5..3.0);
        let heading = rng.gen_range(0.0..2.0 * PI);
        MotionPattern {
            waves,
            velocity: (speed * heading.cos(), speed * heading.sin()),
            spin: rng.gen_range(-0.006..0.006),
        }
    }

    pub fn with_motion(mut self, velocity: (f64, f64), spin: f64) -> Self {
        self.velocity = velocity;
        self.spin = spin;
        self
    }

    /// Evaluate the scene at frame time `t` (integer frame steps; any real
    /// `t` is valid).
    pub fn render_frame<T: Scalar>(&self, t: f64, height: usize, width: usize) -> Tensor<T> {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let (vy, vx) = self.velocity;
        let angle = -self.spin * t;
        let (sin_a, cos_a) = angle.sin_cos();
        let mut out = Tensor::zeros(&[3, height, width]);
        let hw = height * width;
        for y in 0..height {
            for x in 0..width {
                // rigid motion: translate back by t*v, rotate back around center
                let py = y as f64 - t * vy - cy;
                let px = x as f64 - t * vx - cx;
                let qy = sin_a * px + cos_a * py + cy;
                let qx = cos_a * px - sin_a * py + cx;
                let mut acc = [0.5f64; 3];
                for w in &self.waves {
                    let s =
                        (2.0 * PI * w.freq * (qy * w.dir.0 + qx * w.dir.1) + w.phase).sin() * w.amp;
                    for (a, g) in acc.iter_mut().zip(w.gains) {
                        *a += s * g;
                    }
                }
                for c in 0..3 {
                    out.data_mut()[c * hw + y * width + x] = T::from_f64(acc[c]);
                }
            }
        }
        out
    }

    pub fn render_sequence<T: Scalar>(
        &self,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<FrameSequence<T>> {
        let frames = (0..frames)
            .map(|t| self.render_frame(t as f64, height, width))
            .collect();
        FrameSequence::new(frames, ResolutionTag::Hr)
    }
}

/// Deterministic synthetic septuplets.
pub fn synth_generate<T: Scalar>(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
) -> Result<Vec<FrameSequence<T>>> {
    if height % 4 != 0 || width % 4 != 0 {
        return Err(Error::config(format!(
            "synthetic dimensions must be divisible by 4, got {height}x{width}"
        )));
    }
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, 0x53594e_0000 | i as u64);
            MotionPattern::sample(&mut rng).render_sequence(7, height, width)
        })
        .collect()
}

// --- augmentation --------------------------------------------------------------

/// Flip/rotate an image in place of the augmentation pipeline; `rot180` is
/// the 180-degree rotation (the patch is non-square, so quarter turns are
/// excluded).
pub fn apply_flips<T: Scalar>(img: &Tensor<T>, hflip: bool, vflip: bool, rot180: bool) -> Tensor<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let flip_y = vflip ^ rot180;
    let flip_x = hflip ^ rot180;
    if !flip_y && !flip_x {
        return img.clone();
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = img.plane(ci);
        let dst = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let sy = if flip_y { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if flip_x { w - 1 - x } else { x };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Random crop aligned to the 4x grid plus independent horizontal flip,
/// vertical flip and 180-degree rotation, the same transform applied to all
/// frames.
pub fn augment_with<T: Scalar>(
    hr: &FrameSequence<T>,
    seed: u64,
    crop_w: usize,
    crop_h: usize,
) -> Result<FrameSequence<T>> {
    let (h, w) = (hr.height(), hr.width());
    if h < crop_h || w < crop_w {
        return Err(Error::data(format!(
            "frames {w}x{h} are smaller than the {crop_w}x{crop_h} crop"
        )));
    }
    let mut rng = stream_rng(seed, 0x4155_47);
    let y0 = 4 * rng.gen_range(0..=(h - crop_h) / 4);
    let x0 = 4 * rng.gen_range(0..=(w - crop_w) / 4);
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    let rot180 = rng.gen_bool(0.5);

    let frames = hr
        .frames
        .iter()
        .map(|f| {
            let cropped = crop(f, y0, x0, crop_h, crop_w);
            apply_flips(&cropped, hflip, vflip, rot180)
        })
        .collect();
    FrameSequence::new(frames, hr.tag_clone())
}

/// Fixed-size training augmentation (112x64 patches).
pub fn augment<T: Scalar>(hr: &FrameSequence<T>, seed: u64) -> Result<FrameSequence<T>> {
    augment_with(hr, seed, 112, 64)
}

impl<T: Scalar> FrameSequence<T> {
    fn tag_clone(&self) -> ResolutionTag {
        self.tag
    }
}

pub fn crop<T: Scalar>(img: &Tensor<T>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<T> {
    let (c, _, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(&[c, ch, cw]);
    for ci in 0..c {
        let src = img.plane(ci);
        let dst = &mut out.data_mut()[ci * ch * cw..(ci + 1) * ch * cw];
        for y in 0..ch {
            let row = &src[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw];
            dst[y * cw..(y + 1) * cw].copy_from_slice(row);
        }
    }
    out
}

// --- batching --------------------------------------------------------------------

/// Shuffled batch index lists for one epoch; the partial trailing batch is
/// dropped. Iteration order is a pure function of `(seed, epoch)`.
pub fn batch_indices(n_samples: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    debug_assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = stream_rng(seed, 0xBA7C_0000 ^ epoch);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}
