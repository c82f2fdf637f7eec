//! Reader and writer for the IDX container used by MNIST, KMNIST and
//! Fashion-MNIST.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! magic   u32   0x0000_08DD   (08 = unsigned byte, DD = number of dims)
//! sizes   u32 × DD
//! payload product(sizes) bytes, row-major
//! ```
//!
//! Only unsigned-byte tensors of rank 1 (labels) or 3 (images) are accepted.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

const MAGIC_U8_RANK1: u32 = 0x0000_0801;
const MAGIC_U8_RANK3: u32 = 0x0000_0803;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    UnsignedByte,
}

/// Decoded IDX payload: dimensions as stored plus the flat element bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawIdxTensor {
    pub element_kind: ElementKind,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl RawIdxTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if dims.len() != 1 && dims.len() != 3 {
            return Err(Error::InvalidTensor(format!(
                "rank must be 1 or 3, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidTensor("dimension exceeds u32 range".into()));
        }
        let expected = element_count(&dims)
            .ok_or_else(|| Error::InvalidTensor("element count overflows".into()))?;
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {expected} bytes, data has {}",
                data.len()
            )));
        }
        Ok(Self {
            element_kind: ElementKind::UnsignedByte,
            dims,
            data,
        })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn read_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    let chunk = bytes.get(offset..offset + 4)?;
    Some(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
}

/// Decodes an uncompressed IDX byte stream.
pub fn parse_idx(bytes: &[u8]) -> Result<RawIdxTensor> {
    let magic = read_u32(bytes, 0).ok_or(Error::Truncated {
        expected: 4,
        actual: bytes.len(),
    })?;
    let rank = match magic {
        MAGIC_U8_RANK1 => 1,
        MAGIC_U8_RANK3 => 3,
        other => return Err(Error::BadMagic(other)),
    };

    let header_len = 4 + 4 * rank;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let size = read_u32(bytes, 4 + 4 * i).ok_or(Error::Truncated {
            expected: header_len,
            actual: bytes.len(),
        })?;
        dims.push(size as usize);
    }

    let payload_len = element_count(&dims)
        .ok_or_else(|| Error::InvalidTensor("element count overflows".into()))?;
    let expected = header_len + payload_len;
    match bytes.len() {
        n if n < expected => Err(Error::Truncated {
            expected,
            actual: n,
        }),
        n if n > expected => Err(Error::TrailingBytes {
            expected,
            actual: n,
        }),
        _ => Ok(RawIdxTensor {
            element_kind: ElementKind::UnsignedByte,
            dims,
            data: bytes[header_len..].to_vec(),
        }),
    }
}

/// Encodes a tensor back into IDX bytes (uncompressed).
pub fn serialize_idx(tensor: &RawIdxTensor) -> Vec<u8> {
    let magic = match tensor.rank() {
        1 => MAGIC_U8_RANK1,
        _ => MAGIC_U8_RANK3,
    };
    let mut out = Vec::with_capacity(4 + 4 * tensor.rank() + tensor.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

/// Decompresses `bytes` if they carry a gzip header, otherwise returns them as-is.
pub fn maybe_gunzip(bytes: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Reads and parses an IDX file, gzip-compressed or not.
pub fn read_idx_file(path: &Path) -> Result<RawIdxTensor> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = maybe_gunzip(raw).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}
