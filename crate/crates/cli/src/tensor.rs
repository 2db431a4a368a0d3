//! `MSTN` tensor files: magic, `u32` version, `u8` dtype, `u8` rank,
//! `rank × u64` dims, then a little-endian row-major payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use memstream_core::numerics::Matrix;
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"MSTN";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unsupported dtype {0}")]
    Dtype(u8),
    #[error("truncated header")]
    Truncated,
    #[error("payload holds {got} bytes, dims need {expected}")]
    PayloadLength { expected: u64, got: u64 },
    #[error("dims {0:?} overflow")]
    Overflow(Vec<u64>),
    #[error("expected rank {expected}, got dims {dims:?}")]
    Rank { expected: u8, dims: Vec<u64> },
    #[error("non-finite value in payload")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

fn element_count(dims: &[u64]) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| TensorError::Overflow(dims.to_vec()))
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() as u64 {
            return Err(TensorError::PayloadLength {
                expected: expected * 4,
                got: data.len() as u64 * 4,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len() as u64],
            data,
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(TensorError::Rank {
                expected: 2,
                dims: self.dims,
            });
        }
        let (rows, cols) = (self.dims[0] as usize, self.dims[1] as usize);
        Matrix::new(rows, cols, self.data).map_err(|_| TensorError::NonFinite)
    }

    pub fn into_vector(self) -> Result<Vec<f32>> {
        if self.dims.len() != 1 {
            return Err(TensorError::Rank {
                expected: 1,
                dims: self.dims,
            });
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 4 * self.data.len());
        write_header(&mut out, &self.dims);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let dims = read_header(&mut cursor)?;
        let expected = element_count(&dims)? * 4;
        if cursor.len() as u64 != expected {
            return Err(TensorError::PayloadLength {
                expected,
                got: cursor.len() as u64,
            });
        }
        let data = cursor
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }
}

fn write_header(out: &mut Vec<u8>, dims: &[u64]) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
}

fn read_header<R: Read>(r: &mut R) -> Result<Vec<u64>> {
    let mut fixed = [0u8; 10];
    r.read_exact(&mut fixed).map_err(|_| TensorError::Truncated)?;
    if &fixed[..4] != TENSOR_MAGIC {
        return Err(TensorError::BadMagic);
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(TensorError::Version(version));
    }
    if fixed[8] != DTYPE_F32 {
        return Err(TensorError::Dtype(fixed[8]));
    }
    let mut dims = Vec::with_capacity(fixed[9] as usize);
    for _ in 0..fixed[9] {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(|_| TensorError::Truncated)?;
        dims.push(u64::from_le_bytes(d));
    }
    Ok(dims)
}

/// Dims of a tensor file, checked against its length without reading the payload.
pub fn read_dims(path: &Path) -> Result<Vec<u64>> {
    let io = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(path).map_err(io)?;
    let len = file.metadata().map_err(io)?.len();
    let dims = read_header(&mut file)?;
    let expected = element_count(&dims)? * 4;
    let got = len - 10 - 8 * dims.len() as u64;
    if got != expected {
        return Err(TensorError::PayloadLength { expected, got });
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"MSTN");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &3u64.to_le_bytes());
        assert_eq!(&b[26..30], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 26 + 24);
    }

    #[test]
    fn rejects_corruption() {
        let b = Tensor::vector(vec![1.0, 2.0]).to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::BadMagic)));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::Version(2))));
        let mut bad = b.clone();
        bad[8] = 1;
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::Dtype(1))));
        assert!(matches!(
            Tensor::from_bytes(&b[..b.len() - 1]),
            Err(TensorError::PayloadLength { .. })
        ));
        assert!(matches!(Tensor::from_bytes(&b[..7]), Err(TensorError::Truncated)));
        assert!(Tensor::new(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn header_only_read_matches_full_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mstn");
        let t = Tensor::new(vec![4, 1, 2], (0..8).map(|x| x as f32).collect()).unwrap();
        t.write(&path).unwrap();
        assert_eq!(read_dims(&path).unwrap(), vec![4, 1, 2]);
        assert_eq!(Tensor::read(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3fff_ffff))
                .collect();
            let t = Tensor::new(vec![rows as u64, cols as u64], data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
