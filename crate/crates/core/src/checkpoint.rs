//! `LDCK` tensor checkpoints.
//!
//! Layout, all integers little-endian: magic `LDCK`, u32 version, u32 tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 rank, one
//! u32 per dimension and the f32 values. A trailing u64 holds the first eight
//! bytes of the SHA-256 of everything before it.

use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{NdArray, ParamStore};

pub const LDCK_MAGIC: &[u8; 4] = b"LDCK";
pub const LDCK_VERSION: u32 = 1;

/// Named tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, NdArray<f32>)>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: NdArray<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("checkpoint", "tensor name too long"));
        }
        if value.rank() > u8::MAX as usize || value.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::invalid("checkpoint", format!("tensor `{name}` shape not representable")));
        }
        if self.get(&name).is_some() {
            return Err(Error::invalid("checkpoint", format!("duplicate tensor `{name}`")));
        }
        self.tensors.push((name, value));
        Ok(())
    }

    /// Append every parameter of `store`, in store order.
    pub fn push_store(&mut self, store: &ParamStore<f32>) -> Result<()> {
        for (_, name, value) in store.iter() {
            self.push(name, value.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn require(&self, name: &str) -> Result<&NdArray<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<f32>)> {
        self.tensors.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Parameters whose names start with `prefix`, in checkpoint order.
    pub fn to_store(&self, prefix: &str) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, value) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            store.add(name, value.clone())?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LDCK_MAGIC);
        out.extend_from_slice(&LDCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, value) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(value.rank() as u8);
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Format {
            what: "checkpoint",
            offset,
            msg,
        };
        if bytes.len() < 20 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("eight bytes"));
        let computed = checksum(&bytes[..body_end]);
        if &bytes[..4] != LDCK_MAGIC {
            return Err(err(0, "bad magic".into()));
        }
        if stored != computed {
            return Err(Error::Checksum {
                offset: body_end,
                stored,
                computed,
            });
        }
        let mut r = Reader {
            body: &bytes[..body_end],
            pos: 4,
        };
        let version = r.u32("version")?;
        if version != LDCK_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut out = Checkpoint::new();
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let start = r.pos;
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("two bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| err(start + 2, "name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(err(start, format!("duplicate tensor `{name}`")));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| err(start, format!("tensor `{name}` is too large")))?;
            let data = r
                .take(n, "tensor data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let value = NdArray::new(shape, data).map_err(|e| err(start, e.to_string()))?;
            out.tensors.push((name, value));
        }
        if r.pos != r.body.len() {
            return Err(err(r.pos, format!("{} unread bytes before the checksum", r.body.len() - r.pos)));
        }
        Ok(out)
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

struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.body.len() - self.pos < n {
            return Err(Error::Format {
                what: "checkpoint",
                offset: self.body.len(),
                msg: format!("truncated {what} starting at byte {}", self.pos),
            });
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}
