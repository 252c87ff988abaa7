//! Flat binary container shared by model and dataset files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic `KEDSTORE`                          |
//! | 4                | format version (`u32`, currently 1)       |
//! | 4                | payload kind (`u32`: 1 model, 2 dataset)  |
//! | 8                | header length `H` (`u64`)                 |
//! | H                | UTF-8 JSON header                         |
//! | 32               | SHA-256 of the header bytes               |
//! | 8                | array count `N` (`u64`)                   |
//! | N x (8 + 8n + 8) | per array: length `n`, `n` f64 values, first 8 bytes of the SHA-256 of the value bytes |
//!
//! The header hash doubles as the configuration hash: it changes whenever
//! the stored architecture or metadata changes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KEDSTORE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    Model = 1,
    Dataset = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: StoreKind,
    pub header: String,
    pub arrays: Vec<Vec<f64>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Container {
    pub fn config_hash(&self) -> String {
        sha256_hex(self.header.as_bytes())
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|a| 16 + 8 * a.len()).sum();
        let mut out = Vec::with_capacity(64 + self.header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&Sha256::digest(self.header.as_bytes()));
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            let start = out.len();
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let digest = Sha256::digest(&out[start..]);
            out.extend_from_slice(&digest[..8]);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Container> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.error(0, "not a KEDSTORE file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(8, format!("unsupported format version {version}")));
        }
        let kind = match r.u32("kind")? {
            1 => StoreKind::Model,
            2 => StoreKind::Dataset,
            k => return Err(r.error(12, format!("unknown payload kind {k}"))),
        };
        let header_len = r.u64("header length")? as usize;
        let header_at = r.pos;
        let header_bytes = r.take(header_len, "header")?;
        let stored = r.take(32, "header hash")?;
        let computed = Sha256::digest(header_bytes);
        if stored != computed.as_slice() {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
                stored: hex(stored),
                computed: hex(&computed),
            });
        }
        let header = std::str::from_utf8(header_bytes)
            .map_err(|e| r.error(header_at as u64, format!("header is not UTF-8: {e}")))?
            .to_string();
        let count = r.u64("array count")?;
        let mut arrays = Vec::new();
        for i in 0..count {
            let len_at = r.pos;
            let len = r.u64("array length")? as usize;
            let remaining = (r.bytes.len() - r.pos) / 8;
            if len > remaining {
                return Err(r.error(
                    len_at as u64,
                    format!("array {i} claims {len} values but only {remaining} fit"),
                ));
            }
            let data_at = r.pos;
            let raw = r.take(8 * len, "array data")?;
            let checksum = r.take(8, "array checksum")?;
            if Sha256::digest(raw)[..8] != *checksum {
                return Err(r.error(
                    data_at as u64,
                    format!(
                        "checksum mismatch in array {i} (bytes {data_at}..{})",
                        data_at + 8 * len
                    ),
                ));
            }
            arrays.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            );
        }
        if r.pos != bytes.len() {
            return Err(r.error(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Container {
            kind,
            header,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::decode(&bytes, path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: u64, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}
