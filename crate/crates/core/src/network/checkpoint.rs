//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ANCHSPOT"
//! version    u32
//! config     u32 length + UTF-8 JSON ModelConfig
//! meta       u32 length + UTF-8 JSON object (training step, seed, ...)
//! count      u32
//! count x record:
//!   name     u32 length + UTF-8
//!   kind     u8   0 = parameter, 1 = buffer, 2 = optimizer momentum
//!   dtype    u8   4 = f32, 8 = f64
//!   rank     u32, then rank x u64 dims
//!   data     numel x dtype bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ANCHSPOT";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_MOMENTUM: u8 = 2;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Momentum buffers keyed by parameter name, when saved for resuming.
    pub momentum: Option<ParamStore<T>>,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never truncates a good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, ckpt: &Checkpoint<T>) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    write_blob(w, serde_json::to_string(&ckpt.model.config)?.as_bytes())?;
    write_blob(w, serde_json::to_string(&ckpt.meta)?.as_bytes())?;
    let momentum = ckpt.momentum.as_ref().map(|m| m.entries()).unwrap_or(&[]);
    let count = ckpt.model.params.len() + momentum.len();
    w.write_all(&(count as u32).to_le_bytes()).map_err(io)?;
    for e in ckpt.model.params.entries() {
        let kind = match e.kind {
            ParamKind::Trainable => KIND_PARAM,
            ParamKind::Buffer => KIND_BUFFER,
        };
        write_tensor(w, &e.name, kind, &e.value)?;
    }
    for e in momentum {
        write_tensor(w, &e.name, KIND_MOMENTUM, &e.value)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Checkpoint<T>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_slice(&read_blob(r)?)?;
    config.validate()?;
    let meta: serde_json::Value = serde_json::from_slice(&read_blob(r)?)?;
    let count = read_u32(r)?;
    let mut stored = ParamStore::new();
    let mut momentum = ParamStore::new();
    for _ in 0..count {
        let (name, kind, t) = read_tensor::<T>(r)?;
        match kind {
            KIND_PARAM => {
                stored.insert(&name, t, ParamKind::Trainable);
            }
            KIND_BUFFER => {
                stored.insert(&name, t, ParamKind::Buffer);
            }
            KIND_MOMENTUM => {
                momentum.insert(&name, t, ParamKind::Buffer);
            }
            k => return Err(Error::Checkpoint(format!("unknown record kind {k}"))),
        }
    }
    let mut model = Model::new(config, 0)?;
    if stored.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the configuration declares {}",
            stored.len(),
            model.params.len()
        )));
    }
    model.params.load_from(&stored)?;
    Ok(Checkpoint {
        model,
        momentum: (!momentum.is_empty()).then_some(momentum),
        meta,
    })
}

fn write_blob(w: &mut impl Write, b: &[u8]) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(&(b.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(b).map_err(io)
}

fn write_tensor<T: Scalar>(w: &mut impl Write, name: &str, kind: u8, t: &Tensor<T>) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    write_blob(w, name.as_bytes())?;
    let dtype = std::mem::size_of::<T>() as u8;
    w.write_all(&[kind, dtype]).map_err(io)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    let mut data = Vec::with_capacity(t.numel() * dtype as usize);
    for &v in t.data() {
        match dtype {
            4 => data.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            _ => data.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    w.write_all(&data).map_err(io)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_blob(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<(String, u8, Tensor<T>)> {
    let name = String::from_utf8(read_blob(r)?)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let mut kd = [0u8; 2];
    read_exact(r, &mut kd)?;
    let [kind, dtype] = kd;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let width = match dtype {
        4 | 8 => dtype as usize,
        d => return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype {d}"))),
    };
    let mut raw = vec![0u8; numel * width];
    read_exact(r, &mut raw)?;
    let data = raw
        .chunks_exact(width)
        .map(|c| {
            let v = if width == 4 {
                f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(c.try_into().expect("8 bytes"))
            };
            T::of(v)
        })
        .collect();
    Ok((name, kind, Tensor::from_vec(&shape, data)?))
}
