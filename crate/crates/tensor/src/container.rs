//! PFLW checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "PFLW"
//! version    u16
//! entries    u32
//! per entry:
//!   name_len u32, name (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64, 2 = u8 bytes)
//!   rank     u32
//!   extents  rank × u64
//!   values   product(extents) × dtype size, row-major
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFLW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, not a PFLW container")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("truncated container at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("entry name is not UTF-8")]
    Name,
    #[error("missing entry {0:?}")]
    Missing(String),
    #[error("entry {name:?} has dtype {found:?}, expected {expected:?}")]
    WrongType {
        name: String,
        found: DType,
        expected: DType,
    },
    #[error("duplicate entry {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl EntryData {
    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
            EntryData::Bytes(_) => DType::U8,
        }
    }
}

/// Conversion between typed tensors and container entries.
pub trait IntoEntry: Real {
    fn wrap(t: Tensor<Self>) -> EntryData;
    fn unwrap(e: &EntryData) -> Option<&Tensor<Self>>;
}

impl IntoEntry for f32 {
    fn wrap(t: Tensor<Self>) -> EntryData {
        EntryData::F32(t)
    }
    fn unwrap(e: &EntryData) -> Option<&Tensor<Self>> {
        match e {
            EntryData::F32(t) => Some(t),
            _ => None,
        }
    }
}

impl IntoEntry for f64 {
    fn wrap(t: Tensor<Self>) -> EntryData {
        EntryData::F64(t)
    }
    fn unwrap(e: &EntryData) -> Option<&Tensor<Self>> {
        match e {
            EntryData::F64(t) => Some(t),
            _ => None,
        }
    }
}

/// Ordered collection of named entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, EntryData)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: impl Into<String>, data: EntryData) -> Result<(), ContainerError> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ContainerError::Duplicate(name));
        }
        self.entries.push((name, data));
        Ok(())
    }

    pub fn insert_tensor<T: IntoEntry>(
        &mut self,
        name: impl Into<String>,
        t: Tensor<T>,
    ) -> Result<(), ContainerError> {
        self.insert(name, T::wrap(t))
    }

    pub fn get(&self, name: &str) -> Option<&EntryData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn tensor<T: IntoEntry>(&self, name: &str) -> Result<&Tensor<T>, ContainerError> {
        let entry = self
            .get(name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))?;
        T::unwrap(entry).ok_or_else(|| ContainerError::WrongType {
            name: name.to_string(),
            found: entry.dtype(),
            expected: T::DTYPE,
        })
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], ContainerError> {
        match self.get(name) {
            Some(EntryData::Bytes(b)) => Ok(b),
            Some(other) => Err(ContainerError::WrongType {
                name: name.to_string(),
                found: other.dtype(),
                expected: DType::U8,
            }),
            None => Err(ContainerError::Missing(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype().code());
            let shape: Vec<usize> = match data {
                EntryData::F32(t) => t.shape().to_vec(),
                EntryData::F64(t) => t.shape().to_vec(),
                EntryData::Bytes(b) => vec![b.len()],
            };
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for e in &shape {
                out.extend_from_slice(&(*e as u64).to_le_bytes());
            }
            match data {
                EntryData::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                EntryData::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                EntryData::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut container = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ContainerError::Name)?
                .to_string();
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(ContainerError::DType(code))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size()).ok_or(ContainerError::Truncated(r.pos))?)?;
            let data = match dtype {
                DType::F32 => EntryData::F32(decode(&shape, raw)),
                DType::F64 => EntryData::F64(decode(&shape, raw)),
                DType::U8 => EntryData::Bytes(raw.to_vec()),
            };
            container.insert(name, data)?;
        }
        Ok(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode<T: Real>(shape: &[usize], raw: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).expect("length checked by reader")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ContainerError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
