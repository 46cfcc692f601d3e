//! Binary container of named tensors and byte blobs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "SPMMCKPT"         8 bytes
//! version                   u32
//! entry count               u32
//! per entry:
//!   name length, name       u32, UTF-8
//!   kind                    u8 (0 = tensor, 1 = bytes)
//!   tensor: rows, cols      u64, u64, then rows*cols f64
//!   bytes:  length          u64, then raw bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPMMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint or unsupported version (found {found})")]
    VersionMismatch { found: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("entry `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Entry::Tensor(t));
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.entries.insert(name.into(), Entry::Bytes(b));
    }

    pub fn put_text(&mut self, name: impl Into<String>, s: &str) {
        self.put_bytes(name, s.as_bytes().to_vec());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Bytes(_)) => Err(CheckpointError::Format(format!("`{name}` is not a tensor"))),
            None => Err(CheckpointError::Missing(name.to_string())),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match self.entries.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            Some(Entry::Tensor(_)) => Err(CheckpointError::Format(format!("`{name}` is not a byte entry"))),
            None => Err(CheckpointError::Missing(name.to_string())),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str, CheckpointError> {
        std::str::from_utf8(self.bytes(name)?).map_err(|_| CheckpointError::Format(format!("`{name}` is not UTF-8")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Stores every parameter as `<prefix>/<name>`.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.put_tensor(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Overwrites every parameter of `store` from `<prefix>/<name>` entries.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            let t = self.tensor(&name)?;
            let expected = store.get(id).shape();
            if t.shape() != expected {
                return Err(CheckpointError::Shape {
                    name,
                    found: t.shape(),
                    expected,
                });
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CheckpointError> {
        if data.len() < 12 || &data[..8] != MAGIC {
            let found = String::from_utf8_lossy(&data[..data.len().min(8)]).into_owned();
            return Err(CheckpointError::VersionMismatch {
                found: format!("magic {found:?}"),
            });
        }
        let mut r = Reader { data, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: format!("version {version}"),
            });
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Format("entry name is not UTF-8".into()))?
                .to_string();
            let entry = match r.take(1)?[0] {
                0 => {
                    let rows = r.u64()? as usize;
                    let cols = r.u64()? as usize;
                    let n = rows
                        .checked_mul(cols)
                        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= data.len()))
                        .ok_or_else(|| CheckpointError::Format(format!("bad shape for `{name}`")))?;
                    let raw = r.take(n * 8)?;
                    let values = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::Tensor(Tensor::from_vec(rows, cols, values))
                }
                1 => {
                    let len = r.u64()? as usize;
                    Entry::Bytes(r.take(len)?.to_vec())
                }
                k => return Err(CheckpointError::Format(format!("unknown entry kind {k}"))),
            };
            entries.insert(name, entry);
        }
        if r.pos != data.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Checkpoint { entries })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| CheckpointError::Format("unexpected end of file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
