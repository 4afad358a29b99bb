//! Checkpoint format: magic + version, a length-prefixed key=value config
//! block, then length-prefixed named tensor records (UTF-8 name, u32 rank,
//! u64 extents, little-endian f64 payload). Loading validates every shape
//! against the config before accepting the file.

use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::config::KeyValues;
use crate::{GlsError, Result};

const MAGIC: &[u8; 4] = b"GLSC";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> GlsError {
        GlsError::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated: need {} bytes, {} remain",
                n,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = cfg.to_kv().render();
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in &t.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| GlsError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let buf = std::fs::read(path).map_err(|e| GlsError::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GlsError::Format {
            offset: 0,
            msg: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {}", version)));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| r.fail("config block is not UTF-8"))?;
    let cfg = ModelConfig::from_kv(&KeyValues::parse(cfg_text)?)?;
    let expected = ModelParams::shapes(&cfg);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(r.fail(format!(
            "checkpoint has {} tensors, config implies {}",
            count,
            expected.len()
        )));
    }
    let mut params = ModelParams::zeros(&cfg);
    for (want_name, want_shape) in &expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        if &name != want_name {
            return Err(r.fail(format!(
                "unexpected tensor '{}', expected '{}'",
                name, want_name
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if &shape != want_shape {
            return Err(r.fail(format!(
                "tensor '{}' has shape {:?}, config implies {:?}",
                name, shape, want_shape
            )));
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = autodiff::Tensor::new(shape, data).expect("validated shape");
        params.set(&name, t)?;
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok((cfg, params))
}
