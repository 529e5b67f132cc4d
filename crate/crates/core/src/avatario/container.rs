//! Single-file binary container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..4             | magic `GHSA`                              |
//! | 4..8             | `u32` format version                      |
//! | 8..16            | `u64` manifest length `m`                 |
//! | 16..16+m         | UTF-8 JSON manifest                       |
//! | padding          | zeros up to a multiple of 16              |
//! | blobs            | `f64` values, each blob starting 16-aligned |
//!
//! Blob offsets in the manifest are relative to the first blob byte.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GHSA";
pub const VERSION: u32 = 1;
const ALIGN: usize = 16;
/// Manifests larger than this are treated as a corrupt length field.
const MAX_MANIFEST: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

/// Named `f64` blobs plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: Vec<Blob>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blobs.push(Blob {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn blob(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::corrupt(name, "missing blob"))
    }

    /// Blob data checked against an expected length.
    pub fn data(&self, name: &str, len: usize) -> Result<&[f64]> {
        let b = self.blob(name)?;
        if b.data.len() != len {
            return Err(Error::corrupt(
                name,
                format!("expected {len} values, found {}", b.data.len()),
            ));
        }
        Ok(&b.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.blobs.len());
        let mut offset = 0usize;
        let mut payload: Vec<u8> = Vec::new();
        for b in &self.blobs {
            let start = align_up(offset);
            payload.resize(start, 0);
            let bytes: Vec<u8> = b.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            entries.push(BlobEntry {
                name: b.name.clone(),
                shape: b.shape.clone(),
                offset: start as u64,
                count: b.data.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
            offset = payload.len();
        }
        let manifest = Manifest {
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blobs: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + ALIGN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::corrupt("header", "file shorter than header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::corrupt("magic", "not a GHSA container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::corrupt(
                "version",
                format!("unsupported version {version} (expected {VERSION}, little-endian)"),
            ));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if mlen > MAX_MANIFEST || 16 + mlen > bytes.len() as u64 {
            return Err(Error::corrupt(
                "manifest_length",
                format!("manifest length {mlen} exceeds file size {}", bytes.len()),
            ));
        }
        let mend = 16 + mlen as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend])
            .map_err(|e| Error::corrupt("manifest", e.to_string()))?;
        if manifest.version != version {
            return Err(Error::corrupt("version", "manifest and header versions differ"));
        }
        let base = align_up(mend);
        let mut blobs = Vec::with_capacity(manifest.blobs.len());
        for e in &manifest.blobs {
            let start = base as u64 + e.offset;
            let end = e
                .count
                .checked_mul(8)
                .and_then(|n| start.checked_add(n))
                .ok_or_else(|| Error::corrupt(&e.name, "size overflow"))?;
            if end > bytes.len() as u64 {
                return Err(Error::corrupt(&e.name, "truncated"));
            }
            if e.shape.iter().product::<usize>() as u64 != e.count {
                return Err(Error::corrupt(&e.name, "shape does not match value count"));
            }
            let raw = &bytes[start as usize..end as usize];
            if hex(&Sha256::digest(raw)) != e.sha256 {
                return Err(Error::corrupt(&e.name, "checksum mismatch"));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push(Blob {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            blobs,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the container holds the expected kind.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::corrupt("kind", format!("expected {kind}, found {}", self.kind)));
        }
        Ok(())
    }
}
