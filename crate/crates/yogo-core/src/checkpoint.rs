//! Single-file checkpoint container with a little-endian named-tensor table.
//! The byte layout is documented in `docs/checkpoint_format.md`; loading a
//! checkpoint saved on the same platform reproduces forward outputs
//! bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CellOrder, Model, ModelConfig, Variant};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::TraceRow;

const MAGIC: &[u8; 4] = b"YGCP";
const VERSION: u32 = 1;

/// Everything needed to restore a training or evaluation state.
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub run_config_text: String,
    pub epoch: u64,
    pub iteration: u64,
    pub trace_tail: Vec<TraceRow>,
    pub params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(
        model: &Model<T>,
        run_config_text: impl Into<String>,
        epoch: u64,
        iteration: u64,
        trace_tail: &[TraceRow],
    ) -> Self {
        Checkpoint {
            config: model.config().clone(),
            run_config_text: run_config_text.into(),
            epoch,
            iteration,
            trace_tail: trace_tail.to_vec(),
            params: model
                .store
                .iter()
                .map(|(_, name, value)| (name.to_string(), value.clone()))
                .collect(),
        }
    }

    /// Rebuild the model and install the stored parameters. Fails if the
    /// parameter set does not exactly match what the config constructs.
    pub fn into_model(self) -> Result<Model<T>> {
        let mut model = Model::new(self.config, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in self.params {
            model
                .store
                .set_by_name(&name, value)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        }
        Ok(model)
    }
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn encode_config(buf: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.channels,
        cfg.frb_backward,
        cfg.frb_forward,
        cfg.hfb_count,
        cfg.fe_resblocks,
        cfg.scale_spatial,
        cfg.scale_temporal,
        cfg.kernel_k,
    ] {
        push_u32(buf, v as u32);
    }
    buf.push(match cfg.variant {
        Variant::A => 0,
        Variant::B => 1,
        Variant::C => 2,
        Variant::D => 3,
        Variant::E => 4,
    });
    buf.push(match cfg.cell_order {
        CellOrder::AlignThenFuse => 0,
        CellOrder::FuseThenAlign => 1,
    });
}

fn decode_config(r: &mut Reader) -> Result<ModelConfig> {
    let mut vals = [0usize; 8];
    for v in &mut vals {
        *v = r.u32()? as usize;
    }
    let variant = match r.u8()? {
        0 => Variant::A,
        1 => Variant::B,
        2 => Variant::C,
        3 => Variant::D,
        4 => Variant::E,
        t => return Err(Error::Checkpoint(format!("bad variant tag {t}"))),
    };
    let cell_order = match r.u8()? {
        0 => CellOrder::AlignThenFuse,
        1 => CellOrder::FuseThenAlign,
        t => return Err(Error::Checkpoint(format!("bad cell_order tag {t}"))),
    };
    Ok(ModelConfig {
        channels: vals[0],
        frb_backward: vals[1],
        frb_forward: vals[2],
        hfb_count: vals[3],
        fe_resblocks: vals[4],
        scale_spatial: vals[5],
        scale_temporal: vals[6],
        kernel_k: vals[7],
        variant,
        cell_order,
    })
}

pub fn save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    buf.push(T::DTYPE.tag());
    push_u64(&mut buf, ckpt.epoch);
    push_u64(&mut buf, ckpt.iteration);
    encode_config(&mut buf, &ckpt.config);

    let cfg_text = ckpt.run_config_text.as_bytes();
    push_u32(&mut buf, cfg_text.len() as u32);
    buf.extend_from_slice(cfg_text);

    push_u32(&mut buf, ckpt.trace_tail.len() as u32);
    for row in &ckpt.trace_tail {
        push_u64(&mut buf, row.iteration);
        for v in [row.total, row.frame_term, row.structure_term, row.detail_term, row.lr] {
            push_f64(&mut buf, v);
        }
    }

    push_u32(&mut buf, ckpt.params.len() as u32);
    for (name, tensor) in &ckpt.params {
        let name_bytes = name.as_bytes();
        push_u16(&mut buf, name_bytes.len() as u16);
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            push_u32(&mut buf, d as u32);
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Element type stored in a checkpoint, without loading the tensors.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 9];
    file.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    Dtype::from_tag(head[8]).ok_or_else(|| Error::Checkpoint(format!("bad dtype tag {}", head[8])))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let dtype =
        Dtype::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint("bad dtype tag".into()))?;
    if dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let epoch = r.u64()?;
    let iteration = r.u64()?;
    let config = decode_config(&mut r)?;

    let cfg_len = r.u32()? as usize;
    let run_config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;

    let trace_len = r.u32()? as usize;
    let mut trace_tail = Vec::with_capacity(trace_len);
    for _ in 0..trace_len {
        trace_tail.push(TraceRow {
            iteration: r.u64()?,
            total: r.f64()?,
            frame_term: r.f64()?,
            structure_term: r.f64()?,
            detail_term: r.f64()?,
            lr: r.f64()?,
        });
    }

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    let width = T::DTYPE.byte_width();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * width)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }
    Ok(Checkpoint {
        config,
        run_config_text,
        epoch,
        iteration,
        trace_tail,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn tiny_model() -> Model<f32> {
        let cfg = ModelConfig {
            channels: 8,
            frb_backward: 1,
            frb_forward: 1,
            hfb_count: 1,
            fe_resblocks: 1,
            ..ModelConfig::default()
        };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_reproduces_forward_bit_exactly() {
        let model = tiny_model();
        let frames: Vec<Tensor<f32>> = crate::data::synth_generate(3, 1, 16, 16)
            .unwrap()
            .pop()
            .unwrap()
            .frames[0..2]
            .to_vec();
        let run = |m: &Model<f32>| {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &frames).unwrap();
            out.frames
                .iter()
                .map(|&f| tape.value(f).clone())
                .collect::<Vec<_>>()
        };
        let before = run(&model);

        let dir = std::env::temp_dir().join("yogo-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.bin");
        let row = TraceRow {
            iteration: 42,
            total: 0.5,
            frame_term: 0.2,
            structure_term: 0.2,
            detail_term: 0.1,
            lr: 1e-4,
        };
        save(
            &path,
            &Checkpoint::from_model(&model, "seed = 5\n", 3, 42, &[row]),
        )
        .unwrap();

        assert_eq!(peek_dtype(&path).unwrap(), Dtype::F32);
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.iteration, 42);
        assert_eq!(loaded.trace_tail, vec![row]);
        assert_eq!(loaded.run_config_text, "seed = 5\n");
        let restored = loaded.into_model().unwrap();
        let after = run(&restored);
        assert_eq!(before, after);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let model = tiny_model();
        let dir = std::env::temp_dir().join("yogo-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dtype.bin");
        save(&path, &Checkpoint::from_model(&model, "", 0, 0, &[])).unwrap();
        assert!(load::<f64>(&path).is_err());
        assert!(load::<f32>(&path).is_ok());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = tiny_model();
        let dir = std::env::temp_dir().join("yogo-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.bin");
        save(&path, &Checkpoint::from_model(&model, "", 0, 0, &[])).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load::<f32>(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
