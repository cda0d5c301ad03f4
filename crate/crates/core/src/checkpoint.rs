//! Versioned binary container shared by model and training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SMWM" | u32 version | u32 header_len | header (UTF-8 "key=value\n" lines)
//! u32 blob_count | { u64 len | len x f32 } * blob_count
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SMWM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub header: BTreeMap<String, String>,
    pub blobs: Vec<Vec<f32>>,
}

impl Container {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::NotACheckpoint(format!("missing header key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::NotACheckpoint(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for blob in &self.blobs {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::NotACheckpoint("bad magic bytes".into()));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = cur.u32("header length")? as usize;
        let header_bytes = cur.take(header_len, "header")?;
        let header_text = std::str::from_utf8(header_bytes)
            .map_err(|_| Error::NotACheckpoint("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in header_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::NotACheckpoint(format!("malformed header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = cur.u32("blob count")? as usize;
        let mut blobs = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = cur.u64(&format!("blob {i} length"))? as usize;
            let raw = cur.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::TruncatedCheckpoint(format!("blob {i} length overflows")))?,
                &format!("blob {i}"),
            )?;
            blobs.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        if cur.pos != bytes.len() {
            return Err(Error::NotACheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { header, blobs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Read {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            if self.pos == 0 {
                return Err(Error::NotACheckpoint("file too short".into()));
            }
            return Err(Error::TruncatedCheckpoint(format!("{what} ends early")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
