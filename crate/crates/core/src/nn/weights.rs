//! Flat binary weight files with an integrity trailer.
//!
//! Layout: the magic `PXWT0001`, a little-endian u32 entry count, then
//! per entry a u16 name length, the UTF-8 name, a u8 rank, u32
//! dimensions, and the f32 payload; the file ends with a SHA-256 digest
//! of everything before it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::NnError;

const MAGIC: &[u8; 8] = b"PXWT0001";

/// One named tensor inside a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub value: ArrayD<f32>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> NnError {
    NnError::WeightFormat {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Write entries in order. The digest covers magic, count, and every
/// entry byte.
pub fn save_weight_file(path: &Path, entries: &[WeightEntry]) -> Result<(), NnError> {
    let file = File::create(path)?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    };
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(format_err(path, format!("name too long: {}", e.name)));
        }
        if e.value.ndim() > u8::MAX as usize {
            return Err(format_err(path, format!("rank too high: {}", e.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.value.ndim() as u8])?;
        for &d in e.value.shape() {
            if d > u32::MAX as usize {
                return Err(format_err(path, format!("dimension too large: {}", e.name)));
            }
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let standard = e.value.as_standard_layout();
        let slice = standard.as_slice().expect("standard layout");
        // One bulk write per tensor keeps large files fast.
        let mut bytes = Vec::with_capacity(slice.len() * 4);
        for v in slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    let digest = w.hasher.finalize();
    w.inner.write_all(&digest)?;
    w.inner.flush()?;
    Ok(())
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Read a weight file, verifying the magic and the digest trailer.
pub fn load_weight_file(path: &Path) -> Result<Vec<WeightEntry>, NnError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() < MAGIC.len() + 4 + 32 {
        return Err(format_err(path, "file too short"));
    }
    let digest_at = body.len() - 32;
    let mut hasher = Sha256::new();
    hasher.update(&body[..digest_at]);
    if hasher.finalize().as_slice() != &body[digest_at..] {
        return Err(format_err(path, "checksum mismatch, file is corrupt"));
    }
    let body = &body[..digest_at];
    if &body[..8] != MAGIC {
        return Err(format_err(path, "bad magic, not a weight file"));
    }
    let mut at = 8usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *at + n > body.len() {
            return Err(format_err(path, "truncated entry"));
        }
        let s = &body[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut at, name_len)?)
            .map_err(|_| format_err(path, "entry name is not UTF-8"))?
            .to_string();
        let ndims = take(&mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut at, len * 4)?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| format_err(path, e.to_string()))?;
        entries.push(WeightEntry { name, value });
    }
    if at != body.len() {
        return Err(format_err(path, "trailing bytes after last entry"));
    }
    Ok(entries)
}
