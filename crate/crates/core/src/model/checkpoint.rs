//! Checkpoint file format (all integers little-endian):
//!
//! ```text
//! "SKIM"                      4 bytes magic
//! format_version              u32
//! header_len                  u32
//! header                      header_len bytes of JSON (see `Header`)
//! n_arrays                    u32
//! repeated n_arrays times, in layout order:
//!   name_len                  u16
//!   name                      name_len bytes UTF-8
//!   count                     u32
//!   data                      count x f32
//! ```
//!
//! Nothing may follow the last array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryConfig;

use super::{Layout, ModelConfig, Params};

pub const MAGIC: &[u8; 4] = b"SKIM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub memory: MemoryConfig,
    /// Skip rate the weights were trained with.
    pub train_k: u64,
    pub step: u64,
    pub format_version: u32,
}

impl Checkpoint {
    pub fn new(params: Params<f32>, memory: MemoryConfig, train_k: u64, step: u64) -> Self {
        Self {
            params,
            memory,
            train_k,
            step,
            format_version: FORMAT_VERSION,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.params.config,
            memory: self.memory,
            train_k: self.train_k,
            step: self.step,
            param_count: self.params.data.len(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.data.len() * 4 + 64 * self.params.layout.specs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.layout.specs.len() as u32).to_le_bytes());
        for spec in &self.params.layout.specs {
            out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
            for x in &self.params.data[spec.range()] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)?;
        header.model.validate()?;
        let layout = Layout::new(&header.model);
        if header.param_count != layout.total {
            return Err(Error::ParamMismatch(format!(
                "header declares {} parameters, config implies {}",
                header.param_count, layout.total
            )));
        }
        let n_arrays = r.u32("array count")? as usize;
        if n_arrays != layout.specs.len() {
            return Err(Error::ParamMismatch(format!(
                "file has {n_arrays} arrays, config implies {}",
                layout.specs.len()
            )));
        }
        let mut data = vec![0f32; layout.total];
        for spec in &layout.specs {
            let name_len = r.u16("name length")? as usize;
            let name = r.take(name_len, "name")?;
            if name != spec.name.as_bytes() {
                return Err(Error::ParamMismatch(format!(
                    "expected array `{}`, found `{}`",
                    spec.name,
                    String::from_utf8_lossy(name)
                )));
            }
            let count = r.u32("element count")? as usize;
            if count != spec.len() {
                return Err(Error::ParamMismatch(format!(
                    "array `{}` has {count} elements, expected {}",
                    spec.name,
                    spec.len()
                )));
            }
            let raw = r.take(count * 4, &spec.name)?;
            for (dst, src) in data[spec.range()].iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(src.try_into().expect("4-byte chunk"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::ParamMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            params: Params {
                config: header.model,
                layout,
                data,
            },
            memory: header.memory,
            train_k: header.train_k,
            step: header.step,
            format_version: version,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    memory: MemoryConfig,
    train_k: u64,
    step: u64,
    param_count: usize,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

pub fn save(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
