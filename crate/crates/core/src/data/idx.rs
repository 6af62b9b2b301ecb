//! IDX ubyte files: a big-endian header (two zero bytes, type code `0x08`,
//! rank), one big-endian `u32` per dimension, then the raw bytes.

use std::path::Path;

use crate::error::{NifError, Result};

const UBYTE: u8 = 0x08;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Largest payload accepted, to refuse absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(NifError::format(bytes.len(), "file too short for the IDX magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(NifError::format(0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != UBYTE {
        return Err(NifError::format(
            2,
            format!("unsupported IDX element type 0x{:02x}; only unsigned bytes are read", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(NifError::format(3, "IDX rank must be at least 1"));
    }
    let header_end = 4 + 4 * rank;
    if bytes.len() < header_end {
        return Err(NifError::format(
            bytes.len(),
            format!("header declares {rank} dimensions but the file ends first"),
        ));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut total: u64 = 1;
    for k in 0..rank {
        let at = 4 + 4 * k;
        let d = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as u64;
        total = total
            .checked_mul(d)
            .filter(|t| *t <= MAX_ELEMENTS)
            .ok_or_else(|| NifError::format(at, "IDX dimensions overflow the element limit"))?;
        dims.push(d as usize);
    }
    let total = total as usize;
    let body = &bytes[header_end..];
    if body.len() < total {
        return Err(NifError::format(
            bytes.len(),
            format!("truncated IDX body: expected {total} bytes, found {}", body.len()),
        ));
    }
    if body.len() > total {
        return Err(NifError::format(header_end + total, "trailing bytes after the IDX body"));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let total: usize = array.dims.iter().product();
    if array.dims.is_empty() || array.dims.len() > 255 || total != array.data.len() {
        return Err(NifError::Shape(format!(
            "IDX dims {:?} do not describe {} bytes",
            array.dims,
            array.data.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + total);
    out.extend_from_slice(&array.magic().to_be_bytes());
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| NifError::Shape(format!("IDX dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

/// A rank-3 image file as `(count, height, width, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxArray> {
    let array = parse_idx(bytes)?;
    if array.magic() != IMAGE_MAGIC {
        return Err(NifError::format(
            0,
            format!("expected image magic 0x{IMAGE_MAGIC:08x}, found 0x{:08x}", array.magic()),
        ));
    }
    Ok(array)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<IdxArray> {
    let array = parse_idx(bytes)?;
    if array.magic() != LABEL_MAGIC {
        return Err(NifError::format(
            0,
            format!("expected label magic 0x{LABEL_MAGIC:08x}, found 0x{:08x}", array.magic()),
        ));
    }
    Ok(array)
}

pub fn read_idx_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

pub fn write_idx_file(path: &Path, array: &IdxArray) -> Result<()> {
    std::fs::write(path, encode_idx(array)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 64, 128, 255, 1, 2, 3, 4]);
        b
    }

    #[test]
    fn hand_built_images_decode() {
        let a = parse_idx_images(&fixture()).unwrap();
        assert_eq!(a.dims, vec![2, 2, 2]);
        assert_eq!(&a.data[..4], &[0, 64, 128, 255]);
        assert_eq!(&a.data[4..], &[1, 2, 3, 4]);
    }

    #[test]
    fn round_trip_is_identity() {
        let a = parse_idx(&fixture()).unwrap();
        assert_eq!(encode_idx(&a).unwrap(), fixture());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.idx");
        write_idx_file(&path, &a).unwrap();
        assert_eq!(parse_idx(&read_idx_file(&path).unwrap()).unwrap(), a);
    }

    #[test]
    fn labels_are_not_images() {
        let labels = [0, 0, 8, 1, 0, 0, 0, 3, 7, 8, 9];
        assert_eq!(parse_idx_labels(&labels).unwrap().data, vec![7, 8, 9]);
        assert!(matches!(parse_idx_images(&labels), Err(NifError::Format { offset: 0, .. })));
    }

    fn offset_of(bytes: &[u8]) -> usize {
        match parse_idx_images(bytes) {
            Err(NifError::Format { offset, .. }) => offset,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let good = fixture();
        // 1. bad magic
        let mut bad = good.clone();
        bad[1] = 1;
        assert_eq!(offset_of(&bad), 0);
        // 2. unsupported element type
        let mut bad = good.clone();
        bad[2] = 0x0D;
        assert_eq!(offset_of(&bad), 2);
        // 3. short header
        assert_eq!(offset_of(&good[..3]), 3);
        // 4. dimensions cut off
        assert_eq!(offset_of(&good[..10]), 10);
        // 5. truncated body
        assert_eq!(offset_of(&good[..good.len() - 1]), good.len() - 1);
        // 6. oversized dimensions
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&u32::MAX.to_be_bytes());
        bad[8..12].copy_from_slice(&u32::MAX.to_be_bytes());
        assert_eq!(offset_of(&bad), 8);
        // 7. trailing bytes
        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(offset_of(&bad), good.len());
        // 8. zero rank
        assert_eq!(offset_of(&[0, 0, 8, 0]), 3);
    }
}
