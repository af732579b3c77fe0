//! Binary checkpoint container shared by bank, net and dataset files.
//!
//! Layout: 4-byte magic, u16 format version, u64 FNV-1a checksum of the
//! body, then the body (config block, tables, little-endian f64 payload as
//! defined by each producer). Any corrupted byte fails the checksum, so a
//! damaged file is rejected before any state is built.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 8;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Write `magic + version + checksum + body` atomically (temp file + rename).
pub fn write_file(path: &Path, magic: &[u8; 4], body: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a64(body).to_le_bytes());
    out.extend_from_slice(body);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read and validate a container, returning the body bytes.
pub fn read_file(path: &Path, magic: &[u8; 4]) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: "file shorter than header".into(),
        });
    }
    if &bytes[0..4] != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected {:?}",
                &bytes[0..4],
                magic
            ),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {}", version),
        });
    }
    let stored = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(Error::Format {
            offset: 6,
            msg: "checksum mismatch (corrupted file)".into(),
        });
    }
    Ok(body.to_vec())
}

/// Sequential little-endian reader with offset-aware errors.
///
/// Offsets in errors are absolute file offsets (header included).
pub struct BodyReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        HEADER_LEN + self.pos
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn finish(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(Error::Format {
                offset: self.offset(),
                msg: format!("{} trailing bytes", self.bytes.len() - self.pos),
            })
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset(),
                msg: format!("truncated while reading {}", what),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub struct BodyWriter {
    bytes: Vec<u8>,
}

impl BodyWriter {
    pub fn new() -> Self {
        Self { bytes: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

impl Default for BodyWriter {
    fn default() -> Self {
        Self::new()
    }
}
