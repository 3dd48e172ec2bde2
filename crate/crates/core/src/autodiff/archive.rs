//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"NCLA"
//! u32    format version
//! u32    record count
//! per record:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 extents
//!   u8  trainable flag
//!   numel x f64 values
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NCLA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveRecord {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

pub fn encode_records(records: &[ArchiveRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.value.shape().len() as u32).to_le_bytes());
        for &e in r.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(r.trainable as u8);
        for v in r.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated archive at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<ArchiveRecord>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("record name: {e}")))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let trainable = match c.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad trainable flag {b}"))),
        };
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        records.push(ArchiveRecord { name, trainable, value });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(records)
}

pub fn store_records(store: &ParamStore) -> Vec<ArchiveRecord> {
    store
        .iter()
        .map(|(_, p)| ArchiveRecord {
            name: p.name.clone(),
            trainable: p.trainable,
            value: p.value.clone(),
        })
        .collect()
}

pub fn write_archive<W: Write>(mut w: W, records: &[ArchiveRecord]) -> Result<()> {
    w.write_all(&encode_records(records))?;
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<ArchiveRecord>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_records(&buf)
}

/// Hex SHA-256 of an encoded archive.
pub fn archive_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
