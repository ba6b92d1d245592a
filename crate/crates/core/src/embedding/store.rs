//! `EMBS` binary embedding store.
//!
//! ```text
//! magic    4 bytes  "EMBS"
//! version  u32 LE   1
//! dim      u32 LE
//! count    u64 LE
//! count x { key_len u32 LE, key UTF-8, dim x f32 LE }
//! ```
//!
//! Records are written in key order, so equal stores produce equal files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::EmbeddingError;

pub const MAGIC: &[u8; 4] = b"EMBS";
pub const VERSION: u32 = 1;

/// Key under which the embedding of `text` is stored.
pub fn text_key(text: &str) -> String {
    format!("text:{}", hex::encode(Sha256::digest(text.as_bytes())))
}

/// Key under which the embedding of image `id` is stored.
pub fn image_key(id: &str) -> String {
    format!("image:{id}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, records: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inserts or replaces a record.
    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f32>) -> Result<(), EmbeddingError> {
        if values.len() != self.dim {
            return Err(EmbeddingError::DimMismatch { expected: self.dim, found: values.len() });
        }
        let key = key.into();
        if key.len() > u32::MAX as usize {
            return Err(EmbeddingError::Format("key too long".into()));
        }
        self.records.insert(key, values);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.records.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.records.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.records.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.records.len() * (16 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (key, values) in &self.records {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if count > 0 && dim == 0 {
            return Err(EmbeddingError::Format("dim mismatch: records with dim 0".into()));
        }
        let mut records = BTreeMap::new();
        for i in 0..count {
            let key_len = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(key_len)?)
                .map_err(|_| EmbeddingError::Format(format!("record {i}: key is not UTF-8")))?
                .to_string();
            let raw = r.take(dim * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if records.insert(key.clone(), values).is_some() {
                return Err(EmbeddingError::Format(format!("duplicate key {key}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(EmbeddingError::Format(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { dim, records })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            EmbeddingError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EmbeddingError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes a store atomically (temp file + rename).
pub fn write_store(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| EmbeddingError::Io(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("embs.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&store.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbeddingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| EmbeddingError::Io(format!("{}: {e}", path.display())))?;
    EmbeddingStore::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(4);
        s.insert("a", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.insert("image:p1", vec![-0.5, 0.0, 0.25, 8.0]).unwrap();
        s.insert(text_key("hello"), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        s
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.embs");
        write_store(&path, &sample()).unwrap();
        assert_eq!(read_store(&path).unwrap(), sample());
    }

    #[test]
    fn empty_store_is_valid() {
        let s = EmbeddingStore::new(8);
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 20);
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"EMBS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        // first record in key order is "a"
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(bytes[24], b'a');
        assert_eq!(f32::from_le_bytes(bytes[25..29].try_into().unwrap()), 1.0);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, 19, 30, bytes.len() - 1] {
            assert!(matches!(EmbeddingStore::from_bytes(&bytes[..cut]), Err(EmbeddingError::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(EmbeddingError::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(EmbeddingStore::from_bytes(&extra), Err(EmbeddingError::Format(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(EmbeddingStore::from_bytes(&v2), Err(EmbeddingError::Format(_))));
    }

    #[test]
    fn insert_checks_dim() {
        let mut s = EmbeddingStore::new(3);
        assert!(matches!(s.insert("k", vec![1.0]), Err(EmbeddingError::DimMismatch { .. })));
    }

    #[test]
    fn keys() {
        assert_eq!(
            text_key(""),
            "text:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(image_key("img_9"), "image:img_9");
    }
}
