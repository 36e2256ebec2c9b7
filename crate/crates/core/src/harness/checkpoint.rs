//! Binary checkpoints: a checksummed header, the run configuration and named
//! parameter blocks stored as little-endian `f64`.
//!
//! Layout:
//! `magic[8] | version u32 | sha256(payload)[32] | payload`, where the payload
//! is `config_len u64 | config utf-8 | count u64 | block*` and each block is
//! `name_len u32 | name | trainable u8 | ndim u32 | dims u64* | data f64*`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::ParamRegistry;

pub const MAGIC: &[u8; 8] = b"FKDCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Serialized run configuration.
    pub config: String,
    pub params: Vec<ParamBlock>,
}

/// How a checkpoint is matched against a registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Names must coincide exactly.
    Exact,
    /// Every checkpoint parameter must exist in the registry; extra registry
    /// parameters keep their values.
    Subset,
}

impl Checkpoint {
    pub fn from_registry(config: impl Into<String>, registry: &ParamRegistry) -> Self {
        let params = registry
            .iter()
            .map(|(name, t, trainable)| ParamBlock {
                name: name.to_string(),
                trainable,
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        Self {
            config: config.into(),
            params,
        }
    }

    /// Keeps only the blocks whose name satisfies `keep`.
    pub fn filtered(mut self, keep: impl Fn(&str) -> bool) -> Self {
        self.params.retain(|p| keep(&p.name));
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        payload.extend_from_slice(self.config.as_bytes());
        payload.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            payload.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            payload.extend_from_slice(p.name.as_bytes());
            payload.push(u8::from(p.trainable));
            payload.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                payload.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Integrity(format!(
                "checkpoint is {} bytes, shorter than its header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let payload = &bytes[HEADER_LEN..];
        if Sha256::digest(payload).as_slice() != &bytes[12..HEADER_LEN] {
            return Err(Error::Integrity(
                "checkpoint checksum mismatch (truncated or corrupt)".into(),
            ));
        }
        let mut r = Cursor {
            buf: payload,
            pos: 0,
        };
        let config_len = r.len_u64()?;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Integrity("config block is not utf-8".into()))?;
        let count = r.len_u64()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("parameter name is not utf-8".into()))?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => {
                    return Err(Error::Integrity(format!(
                        "bad trainable flag {b} for `{name}`"
                    )))
                }
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Integrity(format!("block `{name}` overruns the file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(ParamBlock {
                name,
                trainable,
                shape,
                data,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after last block",
                r.remaining()
            )));
        }
        Ok(Self { config, params })
    }

    /// Writes through a temporary sibling and renames, so readers never
    /// observe a half-written file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies parameter values into `registry`. Every block is checked
    /// before any value is written, so a failed load leaves the registry
    /// untouched. Trainable flags of the registry are kept.
    pub fn apply(&self, registry: &ParamRegistry, mode: LoadMode) -> Result<()> {
        let mut targets = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = registry.get(&p.name).ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint parameter `{}` is not in the model",
                    p.name
                ))
            })?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: t.shape().to_vec(),
                    found: p.shape.clone(),
                });
            }
            targets.push(t);
        }
        if mode == LoadMode::Exact {
            let missing: Vec<&str> = registry
                .names()
                .filter(|n| !self.params.iter().any(|p| p.name == *n))
                .collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!(
                    "checkpoint lacks parameters {missing:?}"
                )));
            }
        }
        for (t, p) in targets.into_iter().zip(&self.params) {
            t.set_data(&p.data)?;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Integrity(format!(
                "wanted {n} bytes at offset {}, file ends first",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v)
            .map_err(|_| Error::Integrity(format!("length {v} does not fit in memory")))
    }
}
