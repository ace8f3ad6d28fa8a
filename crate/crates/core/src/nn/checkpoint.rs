//! Weight serialization.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic   "GSEGμ1" (7 bytes, UTF-8)
//! clen    config JSON byte length
//! config  JSON-encoded ModelConfig
//! count   number of parameter records
//! repeat count times:
//!   nlen  name byte length
//!   name  UTF-8 parameter name
//!   shape 4 × u32
//!   data  product(shape) × f32 little-endian
//! crc     CRC32 (IEEE) of every preceding byte
//! ```
//!
//! Records appear in model storage order, running statistics included, so
//! save → load → save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::model::{build_model, Model, ModelConfig};
use super::tensor::Tensor;

pub const MAGIC: &[u8] = "GSEG\u{3bc}1".as_bytes();

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    BadChecksum { stored: u32, computed: u32 },
    #[error("checkpoint does not match the expected model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// CRC32, IEEE reflected polynomial 0xEDB88320.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = u32::MAX;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xff) as usize] ^ (crc >> 8);
    }
    !crc
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(&model.cfg).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32(&bytes[..body_len]);
    if stored != computed {
        return Err(CheckpointError::BadChecksum { stored, computed });
    }

    let mut r = Reader {
        buf: &bytes[..body_len],
        pos: MAGIC.len(),
    };
    let clen = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(clen)?)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let mut model = build_model::<f32>(&cfg, 0)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;

    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(CheckpointError::Corrupt(format!(
            "parameter count {count}, config implies {}",
            model.params().len()
        )));
    }
    for i in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| CheckpointError::Corrupt("parameter name not UTF-8".into()))?
            .to_string();
        let shape = [
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        ];
        let expect = &model.params()[i];
        if expect.name != name || expect.value.shape() != shape {
            return Err(CheckpointError::Corrupt(format!(
                "record {i} is {name} {shape:?}, config implies {} {:?}",
                expect.name,
                expect.value.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.params_mut()[i].value = Tensor::from_vec(shape, data);
    }
    if r.pos != body_len {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
