//! Decoder for the classic IDX image/label archives, plain or gzipped.

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Upper bounds on header claims, to keep hostile inputs from forcing huge
/// allocations before any data arrives.
const MAX_ITEMS: usize = 1 << 24;
const MAX_SIDE: usize = 1 << 12;
const MAX_TOTAL_BYTES: usize = 1 << 28;

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::IdxFormat("truncated header".into()))?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads exactly `total` payload bytes, in chunks so a lying header cannot
/// provoke a giant up-front allocation, and rejects trailing garbage.
fn read_payload<R: Read>(r: &mut R, total: usize) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut remaining = total;
    let mut chunk = vec![0u8; (1 << 20).min(total.max(1))];
    while remaining > 0 {
        let want = chunk.len().min(remaining);
        let got = r
            .read(&mut chunk[..want])
            .map_err(|e| Error::IdxFormat(format!("read failed: {e}")))?;
        if got == 0 {
            return Err(Error::IdxFormat(format!(
                "truncated payload: expected {total} bytes, got {}",
                data.len()
            )));
        }
        data.extend_from_slice(&chunk[..got]);
        remaining -= got;
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(data),
        Ok(_) => Err(Error::IdxFormat("trailing bytes after payload".into())),
        Err(e) => Err(Error::IdxFormat(format!("read failed: {e}"))),
    }
}

/// Decoded images: row-major `n * h * w` bytes.
pub struct IdxImages {
    pub data: Vec<u8>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

pub fn read_idx_images<R: Read>(mut r: R) -> Result<IdxImages> {
    let magic = read_u32_be(&mut r)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::IdxFormat(format!(
            "bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let h = read_u32_be(&mut r)? as usize;
    let w = read_u32_be(&mut r)? as usize;
    if n > MAX_ITEMS || h == 0 || w == 0 || h > MAX_SIDE || w > MAX_SIDE {
        return Err(Error::IdxFormat(format!(
            "image dims out of range: n={n} h={h} w={w}"
        )));
    }
    let total = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .filter(|&t| t <= MAX_TOTAL_BYTES)
        .ok_or_else(|| Error::IdxFormat("image payload too large".into()))?;
    let data = read_payload(&mut r, total)?;
    Ok(IdxImages { data, n, h, w })
}

pub fn read_idx_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let magic = read_u32_be(&mut r)?;
    if magic != LABEL_MAGIC {
        return Err(Error::IdxFormat(format!(
            "bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    if n > MAX_ITEMS {
        return Err(Error::IdxFormat(format!("label count out of range: {n}")));
    }
    read_payload(&mut r, n)
}

/// Decode from bytes, transparently gunzipping when the gzip magic is seen.
pub fn decode_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    if is_gzip(bytes) {
        read_idx_images(flate2::read::GzDecoder::new(bytes))
    } else {
        read_idx_images(bytes)
    }
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if is_gzip(bytes) {
        read_idx_labels(flate2::read::GzDecoder::new(bytes))
    } else {
        read_idx_labels(bytes)
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Opens `<dir>/<stem>` or `<dir>/<stem>.gz`, whichever exists.
pub fn open_idx_file(dir: &Path, stem: &str) -> Result<Vec<u8>> {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    let path = if plain.exists() {
        plain
    } else if gz.exists() {
        gz
    } else {
        return Err(Error::IdxFormat(format!(
            "neither {} nor {} exists",
            plain.display(),
            gz.display()
        )));
    };
    Ok(std::fs::read(path)?)
}
