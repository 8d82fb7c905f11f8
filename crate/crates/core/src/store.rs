//! Binary embedding store.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! magic "VWSE" | version u16 = 1 | dim u32 | count u64
//! count × ( id_len u16 | id bytes (UTF-8) | dim × f32 )
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{self, EmbeddingVector, VectorError};

pub const MAGIC: &[u8; 4] = b"VWSE";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated store file")]
    Truncated,
    #[error("trailing bytes after {0} records")]
    TrailingData(u64),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid dimension {0}")]
    InvalidDimension(usize),
    #[error("vector {id:?} has dimension {got}, store expects {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid id: {0}")]
    InvalidId(String),
    #[error("vector {0:?} has zero norm")]
    ZeroVector(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fixed-dimension vectors keyed by string id, in insertion order.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self, StoreError> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(StoreError::InvalidDimension(dim));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, values: &[f32]) -> Result<(), StoreError> {
        let id = id.into();
        if id.len() > u16::MAX as usize {
            return Err(StoreError::InvalidId(format!(
                "id of {} bytes exceeds {}",
                id.len(),
                u16::MAX
            )));
        }
        if values.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                id,
                expected: self.dim,
                got: values.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn vector(&self, id: &str) -> Option<EmbeddingVector> {
        self.get(id).map(|v| EmbeddingVector::new(v.to_vec()))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.row(i)))
    }

    /// L2-normalizes every vector in place; fails on the first zero vector.
    pub fn normalize(&mut self) -> Result<(), StoreError> {
        for i in 0..self.ids.len() {
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            let unit = embedding::l2_normalize(row).map_err(|e| match e {
                VectorError::ZeroNorm => StoreError::ZeroVector(self.ids[i].clone()),
                other => StoreError::InvalidId(other.to_string()),
            })?;
            row.copy_from_slice(&unit);
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self, StoreError> {
        self.normalize()?;
        Ok(self)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), StoreError> {
        sink.write_all(MAGIC)?;
        sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
        sink.write_all(&(self.dim as u32).to_le_bytes())?;
        sink.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (id, values) in self.iter() {
            sink.write_all(&(id.len() as u16).to_le_bytes())?;
            sink.write_all(id.as_bytes())?;
            for v in values {
                sink.write_all(&v.to_le_bytes())?;
            }
        }
        sink.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.ids.len() * (2 + 16 + 4 * self.dim));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, StoreError> {
        let mut magic = [0u8; 4];
        read_exact(&mut source, &mut magic)?;
        if &magic != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = u16::from_le_bytes(read_array(&mut source)?);
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(read_array(&mut source)?) as usize;
        let count = u64::from_le_bytes(read_array(&mut source)?);
        let mut store = Self::new(dim)?;
        let mut values = vec![0f32; dim];
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..count {
            let id_len = u16::from_le_bytes(read_array(&mut source)?) as usize;
            let mut id = vec![0u8; id_len];
            read_exact(&mut source, &mut id)?;
            let id = String::from_utf8(id)
                .map_err(|e| StoreError::InvalidId(format!("non-UTF-8 id: {e}")))?;
            read_exact(&mut source, &mut buf)?;
            for (v, chunk) in values.iter_mut().zip(buf.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            store.insert(id, &values)?;
        }
        let mut probe = [0u8; 1];
        if source.read(&mut probe)? != 0 {
            return Err(StoreError::TrailingData(count));
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file()
                .set_permissions(std::fs::Permissions::from_mode(0o644))?;
        }
        self.write_to(BufWriter::new(tmp.as_file()))?;
        tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }

    /// SHA-256 of the serialized store, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

impl PartialEq for EmbeddingStore {
    /// Compares dimension, ids in order and exact float bits.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), StoreError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::Truncated,
        _ => StoreError::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(source: &mut R) -> Result<[u8; N], StoreError> {
    let mut buf = [0u8; N];
    read_exact(source, &mut buf)?;
    Ok(buf)
}
