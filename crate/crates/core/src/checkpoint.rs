//! Binary checkpoint container.
//!
//! ```text
//! "DCBV" | version u32 | step u64
//! scalar count u32 | (name, u64)*
//! tensor count u32 | (name, dtype u8, rank u32, dims u32*, data)*
//! crc32 u32 over everything before it
//! ```
//!
//! Names are a u32 byte length followed by UTF-8 bytes. All integers and
//! tensor data are little-endian; dtype 0 is f32 and 1 is f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DCBV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub step: u64,
    pub scalars: BTreeMap<String, u64>,
    pub tensors: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(step: u64) -> Self {
        Checkpoint {
            step,
            scalars: BTreeMap::new(),
            tensors: ParamStore::new(),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<u64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing scalar `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_name(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            put_name(&mut out, name);
            out.push(T::DTYPE_TAG);
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            T::to_le_bytes_vec(t.data(), &mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 4 + 4 + 4 {
            return Err(Error::CorruptCheckpoint("file truncated".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptCheckpoint(
                "CRC mismatch (truncated or modified file)".into(),
            ));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let step = r.u64()?;
        let mut scalars = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            scalars.insert(name, r.u64()?);
        }
        let mut tensors = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let dtype = r.take(1)?[0];
            if dtype != T::DTYPE_TAG {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{name}` has dtype tag {dtype}, expected {}",
                    T::DTYPE_TAG
                )));
            }
            let rank = r.u32()? as usize;
            if rank != 4 {
                return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                *d = r.u32()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::from_le_chunk).collect();
            tensors.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes before CRC".into()));
        }
        Ok(Checkpoint { step, scalars, tensors })
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a half-written checkpoint under the final name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))
    }
}
