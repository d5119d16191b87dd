//! IDX files: `0x00 0x00 type rank`, then `rank` big-endian u32 dimension
//! sizes, then the payload. Only the unsigned-byte type (0x08) is accepted.

use std::fs;
use std::path::Path;

use super::{Dataset, Encoding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > 255 || n != data.len() {
            return Err(Error::invalid(format!(
                "idx: dims {dims:?} need {n} bytes, got {}",
                data.len()
            )));
        }
        Ok(IdxArray { dims, data })
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format(format!(
            "idx: header needs 4 bytes, file has {}",
            bytes.len()
        )));
    }
    for (offset, want) in [(0usize, 0u8), (1, 0), (2, UBYTE)] {
        if bytes[offset] != want {
            return Err(Error::format(format!(
                "idx: bad magic at offset {offset}: expected {want:#04x}, found {:#04x}",
                bytes[offset]
            )));
        }
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::format("idx: bad magic at offset 3: rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(format!(
            "idx: truncated header: expected {header} bytes, got {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != payload {
        return Err(Error::format(format!(
            "idx: truncated payload: expected {payload} bytes, got {actual}"
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(a: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, a.dims.len() as u8];
    for d in &a.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    out
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

pub fn write_idx(path: impl AsRef<Path>, a: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(a))?;
    Ok(())
}

/// Pairs an image file (`[n, h, w]` or `[n, c, h, w]`) with a label file
/// (`[n]`). The class count is one more than the largest label.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray, name: &str) -> Result<Dataset> {
    if labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(Error::format(format!(
            "idx: image dims {:?} do not pair with label dims {:?}",
            images.dims, labels.dims
        )));
    }
    let shape = match images.dims.len() {
        3 => vec![images.dims[0], 1, images.dims[1], images.dims[2]],
        4 => images.dims.clone(),
        r => {
            return Err(Error::format(format!(
                "idx: image rank {r} unsupported, need 3 or 4"
            )))
        }
    };
    let samples = Tensor::new(shape, images.data.iter().map(|&b| f64::from(b)).collect())?;
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(name, samples, labels, classes, Encoding::Pixels)
}

pub fn read_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let name = images
        .as_ref()
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    dataset_from_idx(&read_idx(images)?, &read_idx(labels)?, &name)
}
