//! Binary matrix container.
//!
//! Layout (little endian): magic `KMC1`, `u32` format version, `u64` matrix
//! count, then per matrix `u64` rows, `u64` cols and the entries as `f64` in
//! column-major order, followed by the SHA-256 of everything before it.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"KMC1";
pub const CONTAINER_VERSION: u32 = 1;
const MAX_ENTRIES: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a matrix container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("container is truncated")]
    Truncated,
    #[error("container checksum mismatch")]
    Checksum,
    #[error("matrix header {rows}x{cols} is implausible")]
    BadShape { rows: u64, cols: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(matrices: &[Matrix]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrices.len() as u64).to_le_bytes());
    for m in matrices {
        buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(ContainerError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Matrix>, ContainerError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(ContainerError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut c = Cursor { data: body, pos: 4 };
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(ContainerError::Version(version));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(ContainerError::Checksum);
    }
    let count = c.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let (rows, cols) = (c.u64()?, c.u64()?);
        if rows.checked_mul(cols).is_none_or(|n| n > MAX_ENTRIES) {
            return Err(ContainerError::BadShape { rows, cols });
        }
        let n = (rows * cols) as usize;
        let raw = c.take(n * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push(Matrix::from_column_slice(rows as usize, cols as usize, &vals));
    }
    if c.pos != body.len() {
        return Err(ContainerError::Truncated);
    }
    Ok(out)
}

pub fn write_container<W: Write>(mut w: W, matrices: &[Matrix]) -> Result<(), ContainerError> {
    w.write_all(&encode(matrices))?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<Matrix>, ContainerError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Matrix> {
        vec![
            Matrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, -0.0]),
            Matrix::zeros(0, 4),
            Matrix::from_row_slice(1, 1, &[std::f64::consts::PI]),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(sample()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn layout_is_column_major() {
        let bytes = encode(&[Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])]);
        let first = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let second = f64::from_le_bytes(bytes[40..48].try_into().unwrap());
        assert_eq!((first, second), (1.0, 3.0));
        assert_eq!(&bytes[..4], b"KMC1");
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(ContainerError::Checksum | ContainerError::Truncated)));
        bytes[40] ^= 1;
        assert!(matches!(decode(&bytes), Err(ContainerError::Checksum)));
        assert!(matches!(decode(b"NOPE"), Err(ContainerError::BadMagic)));
    }
}
