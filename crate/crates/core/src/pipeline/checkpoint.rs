//! Binary parameter container.
//!
//! Layout, all integers little-endian: `b"FMLT"`, `u32` version, `u64`
//! config fingerprint, `u64` tensor count, then per tensor `u64` name length,
//! UTF-8 name, `u64` rank, `u64` dims, `u8` dtype tag (1 = f64) and the
//! row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMLT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Takes every parameter of `stores` in name order.
    pub fn from_stores(fingerprint: u64, stores: &[&ParamStore]) -> Self {
        let mut tensors: Vec<(String, Tensor)> = stores
            .iter()
            .flat_map(|s| s.iter().map(|(n, t)| (n.to_string(), t.clone())))
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Self {
            fingerprint,
            tensors,
        }
    }

    /// Trainable store of the tensors whose names start with `prefix`.
    pub fn store(&self, prefix: &str) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            s.insert(n.clone(), t.clone(), true)?;
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut b: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut b, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut b)?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let fingerprint = u64::from_le_bytes(take(&mut b)?);
        let count = read_len(&mut b, "tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_len(&mut b, "name length")?;
            let mut name = vec![0u8; len];
            read_exact(&mut b, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_len(&mut b, "rank")?;
            let shape = (0..rank)
                .map(|_| read_len(&mut b, "dimension"))
                .collect::<Result<Vec<_>>>()?;
            let [dtype] = take::<1>(&mut b)?;
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!(
                    "tensor `{name}` has dtype tag {dtype}, only 1 (f64) is supported"
                )));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.saturating_mul(8) <= b.len())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is truncated")))?;
            let data = (0..n)
                .map(|_| take(&mut b).map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !b.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                b.len()
            )));
        }
        Ok(Self {
            fingerprint,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, warning when its fingerprint differs from `expected`.
    pub fn load(path: &Path, expected: Option<u64>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if let Some(fp) = expected {
            if fp != ck.fingerprint {
                log::warn!(
                    "{}: config fingerprint {:016x} differs from the current {:016x}",
                    path.display(),
                    ck.fingerprint,
                    fp
                );
            }
        }
        Ok(ck)
    }
}

fn read_exact(b: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if b.len() < out.len() {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    out.copy_from_slice(&b[..out.len()]);
    *b = &b[out.len()..];
    Ok(())
}

fn take<const N: usize>(b: &mut &[u8]) -> Result<[u8; N]> {
    let mut out = [0u8; N];
    read_exact(b, &mut out)?;
    Ok(out)
}

fn read_len(b: &mut &[u8], what: &str) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(take(b)?))
        .map_err(|_| Error::Format(format!("{what} does not fit in memory")))
}
