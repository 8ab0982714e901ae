//! Versioned binary container for named tensor collections.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! byte 0          version (currently 0x01)
//! u32             number of entries
//! per entry:      u16 name length, name bytes (UTF-8),
//!                 u8 rank, rank x u32 dims,
//!                 u64 byte offset of the payload within the data section
//! data section:   concatenated f64 little-endian arrays
//! ```
//!
//! Loading validates the version byte, every offset, and the exact file
//! length before reading any payload, so a truncated or corrupted file
//! fails cleanly rather than yielding a partial state. Saving writes to a
//! sibling temp file and renames, so a crash never leaves a half-written
//! checkpoint at the target path. Round-trips are bit-exact: payload bytes
//! are the IEEE-754 representations, untouched by any formatting.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{FelError, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u8 = 0x01;

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut manifest: Vec<u8> = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    manifest.push(FORMAT_VERSION);
    let n = u32::try_from(entries.len())
        .map_err(|_| FelError::Checkpoint("too many entries".into()))?;
    manifest.extend_from_slice(&n.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| FelError::Checkpoint(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| FelError::Checkpoint(format!("tensor rank too large: {name}")))?;
        manifest.extend_from_slice(&name_len.to_le_bytes());
        manifest.extend_from_slice(name_bytes);
        manifest.push(rank);
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| FelError::Checkpoint(format!("dimension too large: {name}")))?;
            manifest.extend_from_slice(&d.to_le_bytes());
        }
        manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&manifest)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };
    let version = cursor.u8()?;
    if version != FORMAT_VERSION {
        return Err(FelError::Checkpoint(format!(
            "unsupported container version {version:#04x} (expected {FORMAT_VERSION:#04x})"
        )));
    }
    let n = cursor.u32()? as usize;
    let mut manifest = Vec::with_capacity(n);
    let mut expected_offset: u64 = 0;
    for i in 0..n {
        let name_len = cursor.u16()? as usize;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|_| FelError::Checkpoint(format!("entry {i}: name is not UTF-8")))?;
        let rank = cursor.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u32()? as usize);
        }
        let offset = cursor.u64()?;
        if offset != expected_offset {
            return Err(FelError::Checkpoint(format!(
                "entry {name}: offset {offset} does not match layout ({expected_offset})"
            )));
        }
        let len: usize = shape.iter().product();
        expected_offset += (len * 8) as u64;
        manifest.push((name, shape, len));
    }
    let data_start = cursor.pos;
    let expected_total = data_start as u64 + expected_offset;
    if bytes.len() as u64 != expected_total {
        return Err(FelError::Checkpoint(format!(
            "file length {} does not match manifest ({expected_total} bytes expected)",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (name, shape, len) in manifest {
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let raw: [u8; 8] = cursor.take(8)?.try_into().expect("length-checked read");
            data.push(f64::from_le_bytes(raw));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| FelError::Checkpoint(format!("entry {name}: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FelError::Checkpoint(format!(
                "truncated file: wanted {} bytes at position {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
