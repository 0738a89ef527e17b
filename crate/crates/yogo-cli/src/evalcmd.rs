//! `eval` subcommand: load a checkpoint, score a septuplet directory, write
//! `metrics.json` and optional PNG dumps.
//!
//! Per-frame metrics are split into input positions (1-based odd indices)
//! and interpolated frames. Dumped detail images encode the residue of the
//! predicted frame against the already-quantized structure at half range, so
//! `structure.png + decode(detail.png)` reconstructs `frame.png` within
//! 1/255 per pixel.

use std::fmt::Write as _;
use std::path::Path;

use yogo_core::checkpoint;
use yogo_core::data::{ingest_named, save_png, FrameSequence};
use yogo_core::eval::{evaluate_model, predict_sequence, score_frames, EvalSummary};
use yogo_core::metrics::ChannelMode;
use yogo_core::model::Model;
use yogo_core::tensor::Tensor;
use yogo_core::{Dtype, Error, Result, Scalar};

use crate::rundir;

pub fn run(ckpt: &Path, data: &Path, luma: bool, dump: bool) -> Result<()> {
    let mode = if luma {
        ChannelMode::Luma601
    } else {
        ChannelMode::Rgb
    };
    match checkpoint::peek_dtype(ckpt)? {
        Dtype::F32 => run_typed::<f32>(ckpt, data, mode, dump),
        Dtype::F64 => run_typed::<f64>(ckpt, data, mode, dump),
    }
}

fn run_typed<T: Scalar>(ckpt: &Path, data: &Path, mode: ChannelMode, dump: bool) -> Result<()> {
    let loaded = checkpoint::load::<T>(ckpt)?;
    let seed_label = loaded.iteration;
    let model = loaded.into_model()?;
    let sequences = ingest_named::<T>(data)?;
    if sequences.is_empty() {
        return Err(Error::data(format!(
            "no usable sequences under {}",
            data.display()
        )));
    }

    let dir = rundir::create_run_dir("eval", seed_label)?;
    let dataset: Vec<FrameSequence<T>> = sequences.iter().map(|(_, s)| s.clone()).collect();
    let summary = evaluate_model(&model, &dataset, mode)?;
    let names: Vec<&str> = sequences.iter().map(|(n, _)| n.as_str()).collect();
    let json = summary_json(&summary, &names);
    let path = rundir::write_text(&dir, "metrics.json", &json)?;

    if dump {
        for (name, hr) in &sequences {
            dump_sequence(&dir.join("dumps").join(name), &model, hr)?;
        }
    }
    println!(
        "evaluated {} sequences: mean PSNR {:.3} dB, SSIM {:.4} ({}); report at {}",
        sequences.len(),
        summary.aggregate.psnr_all,
        summary.aggregate.ssim_all,
        mode.as_str(),
        path.display()
    );
    Ok(())
}

fn json_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".into()
    }
}

fn summary_json(summary: &EvalSummary, names: &[&str]) -> String {
    let mut out = String::from("{\n");
    let a = &summary.aggregate;
    let _ = writeln!(out, "  \"channel_mode\": \"{}\",", summary.channel_mode.as_str());
    let _ = writeln!(out, "  \"aggregate\": {{");
    let _ = writeln!(out, "    \"psnr_db\": {},", json_f64(a.psnr_all));
    let _ = writeln!(out, "    \"ssim\": {},", json_f64(a.ssim_all));
    let _ = writeln!(
        out,
        "    \"input_positions\": {{\"psnr_db\": {}, \"ssim\": {}}},",
        json_f64(a.psnr_input_positions),
        json_f64(a.ssim_input_positions)
    );
    let _ = writeln!(
        out,
        "    \"interpolated\": {{\"psnr_db\": {}, \"ssim\": {}}}",
        json_f64(a.psnr_interpolated),
        json_f64(a.ssim_interpolated)
    );
    let _ = writeln!(out, "  }},");
    let _ = writeln!(out, "  \"sequences\": [");
    for (i, (report, name)) in summary.sequences.iter().zip(names).enumerate() {
        let _ = writeln!(out, "    {{");
        let _ = writeln!(out, "      \"id\": {},", serde_json::to_string(name).unwrap());
        let _ = writeln!(out, "      \"mean_psnr_db\": {},", json_f64(report.mean_psnr_db));
        let _ = writeln!(out, "      \"mean_ssim\": {},", json_f64(report.mean_ssim));
        let _ = writeln!(out, "      \"per_frame\": [");
        for (j, &(index, p, s)) in report.per_frame.iter().enumerate() {
            let _ = write!(
                out,
                "        {{\"index\": {index}, \"psnr_db\": {}, \"ssim\": {}}}",
                json_f64(p),
                json_f64(s)
            );
            out.push_str(if j + 1 < report.per_frame.len() { ",\n" } else { "\n" });
        }
        let _ = writeln!(out, "      ]");
        let _ = write!(out, "    }}");
        out.push_str(if i + 1 < summary.sequences.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    out
}

/// Quantize like `save_png` does, staying in `[0,1]` floats.
fn quantize<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| {
        T::from_f64((v.as_f64() * 255.0).round().clamp(0.0, 255.0) / 255.0)
    })
}

fn dump_sequence<T: Scalar>(dir: &Path, model: &Model<T>, hr: &FrameSequence<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pred = predict_sequence(model, hr)?;
    // keep a per-sequence metric file next to the dumps for convenience
    let report = score_frames(&pred.frames, hr, ChannelMode::Rgb)?;
    let mut lines = String::new();
    for &(index, p, s) in &report.per_frame {
        let _ = writeln!(lines, "frame {index}: psnr {} ssim {}", json_f64(p), json_f64(s));
    }
    std::fs::write(dir.join("scores.txt"), lines).map_err(|e| Error::io(dir, e))?;

    for (t, frame) in pred.frames.iter().enumerate() {
        save_png(&dir.join(format!("frame{}.png", t + 1)), frame)?;
        let structure_q = quantize(&pred.structures[t]);
        save_png(&dir.join(format!("structure{}.png", t + 1)), &structure_q)?;
        // residue of the frame against the quantized structure at half range
        let detail_png = Tensor::from_fn(frame.shape(), |i| {
            let d = frame.data()[i].as_f64() - structure_q.data()[i].as_f64();
            T::from_f64(((d + 1.0) * 127.5).round().clamp(0.0, 255.0) / 255.0)
        });
        save_png(&dir.join(format!("detail{}.png", t + 1)), &detail_png)?;
    }
    Ok(())
}
