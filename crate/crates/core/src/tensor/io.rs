//! The `.ten` array file format.
//!
//! Layout: magic `TENS`, version byte (1), dtype byte (0 = f32, 1 = f64,
//! 2 = i32), rank byte, `rank` little-endian u32 dimensions, then the
//! row-major payload in little-endian order.

use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TENS";
const VERSION: u8 = 1;

/// A decoded `.ten` array.
#[derive(Debug, Clone, PartialEq)]
pub enum TenArray {
    F32 { shape: Vec<usize>, values: Vec<f32> },
    F64 { shape: Vec<usize>, values: Vec<f64> },
    I32 { shape: Vec<usize>, values: Vec<i32> },
}

impl TenArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            TenArray::F32 { shape, .. } | TenArray::F64 { shape, .. } | TenArray::I32 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TenArray::F32 { .. } => DType::F32,
            TenArray::F64 { .. } => DType::F64,
            TenArray::I32 { .. } => DType::I32,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let shape = t.shape().to_vec();
        match T::DTYPE {
            DType::F64 => TenArray::F64 {
                shape,
                values: t.values().iter().map(|v| v.as_f64()).collect(),
            },
            _ => TenArray::F32 {
                shape,
                values: t.values().iter().map(|v| v.as_f64() as f32).collect(),
            },
        }
    }

    /// Floating-point payloads convert to any scalar type; i32 payloads are rejected.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        match self {
            TenArray::F32 { shape, values } => {
                Tensor::new(shape.clone(), values.iter().map(|&v| T::of(v as f64)).collect())
            }
            TenArray::F64 { shape, values } => {
                Tensor::new(shape.clone(), values.iter().map(|&v| T::of(v)).collect())
            }
            TenArray::I32 { .. } => Err(Error::input("expected a floating-point array, found i32")),
        }
    }

    pub fn into_i32(self) -> Result<(Vec<usize>, Vec<i32>)> {
        match self {
            TenArray::I32 { shape, values } => Ok((shape, values)),
            other => Err(Error::input(format!("expected an i32 array, found {:?}", other.dtype()))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(7 + 4 * shape.len() + 8 * shape.iter().product::<usize>());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self {
            TenArray::F32 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TenArray::F64 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TenArray::I32 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(Error::input("not a .ten file (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(Error::input(format!("unsupported .ten version {}", bytes[4])));
        }
        let (dtype, ndim) = (bytes[5], bytes[6] as usize);
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::input("truncated .ten header"));
        }
        let shape: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel: usize = shape.iter().product();
        let width = match dtype {
            0 | 2 => 4,
            1 => 8,
            d => return Err(Error::input(format!("unknown .ten dtype {d}"))),
        };
        let payload = &bytes[header..];
        if payload.len() != numel * width {
            return Err(Error::input(format!(
                "payload has {} bytes, shape {shape:?} needs {}",
                payload.len(),
                numel * width
            )));
        }
        Ok(match dtype {
            0 => TenArray::F32 {
                shape,
                values: payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            },
            1 => TenArray::F64 {
                shape,
                values: payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            },
            _ => TenArray::I32 {
                shape,
                values: payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            },
        })
    }
}

pub fn write_ten(path: &Path, array: &TenArray) -> Result<()> {
    std::fs::write(path, array.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_ten(path: &Path) -> Result<TenArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TenArray::decode(&bytes).map_err(|e| match e {
        Error::Input(msg) => Error::input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let a = TenArray::I32 {
            shape: vec![2, 3],
            values: vec![1, 2, 3, 4, 5, -6],
        };
        let bytes = a.encode();
        assert_eq!(&bytes[..4], b"TENS");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &3u32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 4..], &(-6i32).to_le_bytes());
        assert_eq!(bytes.len(), 7 + 8 + 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(TenArray::decode(b"NOPE\x01\x00\x00").is_err());
        let mut bytes = TenArray::F32 {
            shape: vec![4],
            values: vec![1.0; 4],
        }
        .encode();
        bytes.pop();
        assert!(TenArray::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let f: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 7.0 - 50.0).collect();
            for a in [
                TenArray::F64 { shape: dims.clone(), values: f.clone() },
                TenArray::F32 { shape: dims.clone(), values: f.iter().map(|&v| v as f32).collect() },
                TenArray::I32 { shape: dims.clone(), values: f.iter().map(|&v| v as i32).collect() },
            ] {
                prop_assert_eq!(TenArray::decode(&a.encode()).unwrap(), a);
            }
        }
    }
}
