//! Binary container shared by dataset, partition and checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes   "FEDGID\0\x01"
//! version   u32 LE
//! hdr_len   u64 LE
//! header    hdr_len bytes of UTF-8 JSON (kind, meta, array table, checksum)
//! payload   raw little-endian arrays, concatenated in table order
//! ```
//!
//! The checksum is the SHA-256 of the payload, hex encoded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FEDGID\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    U32,
    U64,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U32 => 4,
            DType::U64 | DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    U64(Vec<u64>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::U32(_) => DType::U32,
            ArrayData::U64(_) => DType::U64,
            ArrayData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::U32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::U8 => ArrayData::U8(bytes.to_vec()),
            DType::U32 => ArrayData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U64 => ArrayData::U64(
                bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    payload_len: u64,
    checksum: String,
}

/// In-memory form of one container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: ArrayData,
    ) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "array {name}: shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        self.arrays.push(NamedArray { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let offset = payload.len() as u64;
            a.data.write_le(&mut payload);
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: a.data.dtype(),
                shape: a.shape.clone(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
            payload_len: payload.len() as u64,
            checksum: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses container bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
        if header.version != version {
            return Err(corrupt("header version disagrees with preamble"));
        }
        let payload = &bytes[header_end..];
        let found = hex(&Sha256::digest(payload));
        if payload.len() as u64 != header.payload_len || found != header.checksum {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: header.checksum,
                found,
            });
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + e.nbytes as usize;
            if count * e.dtype.width() != e.nbytes as usize || end > payload.len() {
                return Err(corrupt(&format!(
                    "array {} has an inconsistent extent",
                    e.name
                )));
            }
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: ArrayData::read_le(e.dtype, &payload[start..end]),
            });
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the `kind` tag.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} container, found {}", c.kind),
            });
        }
        Ok(c)
    }

    pub(crate) fn take(&self, name: &str, path: &Path) -> Result<&NamedArray> {
        self.get(name).ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("missing array {name}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new("test", json!({"seed": u64::MAX, "beta": 0.1}));
        c.push(
            "a",
            vec![2, 2],
            ArrayData::F64(vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0]),
        )
        .unwrap();
        c.push("b", vec![3], ArrayData::U8(vec![1, 2, 3])).unwrap();
        c.push("c", vec![1], ArrayData::U32(vec![7])).unwrap();
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes, Path::new("x")).unwrap(), c);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Container::from_bytes(cut, Path::new("x")),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn flipped_payload_bit_is_a_checksum_error() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(
            Container::from_bytes(&bytes, Path::new("x")),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes, Path::new("x")),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(matches!(
            Container::from_bytes(b"not a container at all", Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn push_checks_shape() {
        let mut c = Container::new("t", json!(null));
        assert!(c.push("a", vec![2, 2], ArrayData::U8(vec![1])).is_err());
    }
}
