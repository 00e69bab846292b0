//! SQDS binary stores.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "SQDS"
//! version   u32      1
//! kind      u8       1 = trajectory, 2 = synthetic, 3 = metrics
//! dtype     u8       1 = f64
//! count     u32      number of tensors
//! shapes    count x (rank: u32, rank x dim: u32)
//! payload   f64 LE values of every tensor, in order, row-major
//! crc32     u32      CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! Each store has a JSON manifest next to it (`<name>.json`) describing what
//! the tensors mean. Writes go to a temporary file in the target directory
//! and are renamed into place once complete.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use seqmatch_tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SQDS";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Trajectory = 1,
    Synthetic = 2,
    Metrics = 3,
}

impl PayloadKind {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Self::Trajectory),
            2 => Ok(Self::Synthetic),
            3 => Ok(Self::Metrics),
            other => Err(Error::Format(format!("unknown payload kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Store {
    pub kind: PayloadKind,
    pub tensors: Vec<Tensor>,
}

impl Store {
    pub fn new(kind: PayloadKind, tensors: Vec<Tensor>) -> Self {
        Self { kind, tensors }
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

pub fn encode(store: &Store) -> Result<Vec<u8>> {
    let values: usize = store.tensors.iter().map(Tensor::numel).sum();
    let mut out = Vec::with_capacity(64 + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(store.kind as u8);
    out.push(DTYPE_F64);
    out.extend_from_slice(&u32_of(store.tensors.len(), "tensor count")?.to_le_bytes());
    for t in &store.tensors {
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
    }
    let start = out.len();
    for t in &store.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
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
            .ok_or_else(|| Error::Format(format!("truncated store at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses and validates a store. The header and shape table are checked
/// before any payload byte is interpreted.
pub fn decode(bytes: &[u8]) -> Result<Store> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic("file shorter than magic".into()))?;
    if magic != MAGIC {
        return Err(Error::BadMagic(format!("{magic:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let kind = PayloadKind::from_code(r.u8()?)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    let mut values = 0usize;
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::Format("zero dimension in shape table".into()));
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        values = values
            .checked_add(n)
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        shapes.push(shape);
    }
    let expected = values
        .checked_mul(8)
        .and_then(|p| p.checked_add(r.pos + 4))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "store is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[r.pos..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Ok(Tensor::new(shape, chunks.by_ref().take(n).collect())?)
        })
        .collect::<Result<_>>()?;
    Ok(Store { kind, tensors })
}

/// Writes `bytes` to `path` via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_store(path: &Path, store: &Store) -> Result<()> {
    write_atomic(path, &encode(store)?)
}

pub fn load_store(path: &Path) -> Result<Store> {
    decode(&fs::read(path)?)
}

/// Loads a store and checks its payload kind.
pub fn load_store_of(path: &Path, kind: PayloadKind) -> Result<Store> {
    let store = load_store(path)?;
    if store.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a {:?} payload, expected {kind:?}",
            path.display(),
            store.kind
        )));
    }
    Ok(store)
}

/// `run/teacher.sqds` -> `run/teacher.json`.
pub fn manifest_path(store: &Path) -> PathBuf {
    store.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
