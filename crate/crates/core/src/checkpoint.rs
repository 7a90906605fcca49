//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      b"PGCK"
//! version    u32 (currently 1)
//! config     u64 byte length, then UTF-8 TOML text with a [network] table
//! step       u64
//! arrays     u32 count, then per array:
//!              u32 name length, name bytes,
//!              u32 rank, u64 per dimension,
//!              f64 per element (row-major)
//! center     u64 length, then f64 per entry
//! ```
//!
//! Array names are prefixed `student.`, `teacher.` or `momentum.`.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::networks::{ModelState, NetworkConfig, ParamSet};

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub state: ModelState,
    /// Optimizer momentum buffers keyed like the student parameters.
    pub momentum: ParamSet,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("length {} exceeds remaining data", v)));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("array too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.config_text.len() as u64);
        out.extend_from_slice(self.config_text.as_bytes());
        put_u64(&mut out, self.step);
        let count = self.state.student.len() + self.state.teacher.len() + self.momentum.len();
        put_u32(&mut out, count as u32);
        for (prefix, set) in [
            ("student.", &self.state.student),
            ("teacher.", &self.state.teacher),
            ("momentum.", &self.momentum),
        ] {
            for (name, t) in set.iter() {
                put_array(&mut out, &format!("{}{}", prefix, name), t);
            }
        }
        put_u64(&mut out, self.state.center.len() as u64);
        for v in &self.state.center {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version)));
        }
        let n = r.len()?;
        let config_text = r.string(n)?;
        let config = network_config_from_text(&config_text)?;
        let step = r.u64()?;
        let count = r.u32()?;
        let (mut student, mut teacher, mut momentum) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("array '{}' too large", name)))?;
            let t = Tensor::new(shape, r.f64s(numel)?)?;
            let (set, key) = if let Some(k) = name.strip_prefix("student.") {
                (&mut student, k)
            } else if let Some(k) = name.strip_prefix("teacher.") {
                (&mut teacher, k)
            } else if let Some(k) = name.strip_prefix("momentum.") {
                (&mut momentum, k)
            } else {
                return Err(Error::Checkpoint(format!("unknown array '{}'", name)));
            };
            set.insert(key, t);
        }
        let n = r.u64()? as usize;
        let center = r.f64s(n)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if teacher.names().any(|k| !student.contains(k)) || center.len() != config.num_prototypes {
            return Err(Error::Checkpoint("student, teacher and center are inconsistent".into()));
        }
        Ok(Checkpoint {
            config_text,
            step,
            state: ModelState {
                config,
                student,
                teacher,
                center,
            },
            momentum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads the `[network]` table of a TOML document; a missing table means defaults.
pub fn network_config_from_text(text: &str) -> Result<NetworkConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Checkpoint(format!("config echo: {}", e.message())))?;
    match table.get("network") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Checkpoint(format!("config echo: {}", e.message()))),
        None => Ok(NetworkConfig::default()),
    }
}
