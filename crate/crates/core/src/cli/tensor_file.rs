//! `GVQT` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `GVQT` |
//! | 2 | format version, u16 (currently 1) |
//! | 1 | dtype, u8: 0 = f32, 1 = f64 |
//! | 1 | rank, u8 |
//! | 4 × rank | dims, u32 each |
//! | product(dims) × size(dtype) | payload, row-major little-endian |
//!
//! Reading converts to the requested scalar type; f32 → f64 is exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"GVQT";
pub const TENSOR_FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn of<T: Scalar>() -> Self {
        if T::NAME == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Serialized form of `t` in its own precision.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::shape(format!("rank {} does not fit the file header", t.rank())));
    }
    if let Some(&d) = t.shape().iter().find(|&&d| d > u32::MAX as usize) {
        return Err(Error::shape(format!("dimension {d} does not fit the file header")));
    }
    if !t.all_finite() {
        return Err(Error::numeric("refusing to write a tensor with non-finite values"));
    }
    let dtype = DType::of::<T>();
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.len() * dtype.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&x.as_f64().to_le_bytes()),
        }
    }
    Ok(out)
}

/// Parses one tensor from the front of `bytes`, returning it with the number
/// of bytes consumed. `path` only labels errors.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Tensor<T>, usize)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 8 {
        return Err(bad(format!("header needs 8 bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"GVQT\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_FORMAT_VERSION {
        return Err(bad(format!("unsupported tensor format version {version}")));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| bad(format!("unknown dtype code {}", bytes[6])))?;
    let rank = bytes[7] as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad(format!("header needs {header} bytes, found {}", bytes.len())));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|c| c.checked_mul(dtype.size()).map(|b| (c, b)));
    let (count, payload) = count.ok_or_else(|| bad(format!("dims {shape:?} overflow")))?;
    let available = bytes.len() - header;
    if available < payload {
        return Err(bad(format!(
            "truncated payload: dims {shape:?} need {payload} bytes, found {available}"
        )));
    }
    let body = &bytes[header..header + payload];
    let data: Vec<T> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| T::lift(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| T::lift(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    };
    debug_assert_eq!(data.len(), count);
    Ok((Tensor::from_vec(&shape, data)?, header + payload))
}

pub fn write_tensor_file<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a file holding exactly one tensor.
pub fn read_tensor_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after the payload", bytes.len() - used),
        ));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_standard_normal, RngStream};

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t).unwrap();
        let mut want = b"GVQT".to_vec();
        want.extend_from_slice(&[1, 0, 0, 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn f64_round_trip_and_widening() {
        let t: Tensor<f64> = sample_standard_normal(&[3, 2], &mut RngStream::new(1, 1));
        let (back, used) = decode_tensor::<f64>(&encode_tensor(&t).unwrap(), Path::new("x")).unwrap();
        assert!(back.bit_eq(&t));
        assert_eq!(used, 8 + 8 + 6 * 8);
        let narrow: Tensor<f32> = t.cast();
        let (wide, _) = decode_tensor::<f64>(&encode_tensor(&narrow).unwrap(), Path::new("x")).unwrap();
        assert!(wide.bit_eq(&narrow.cast()));
    }

    #[test]
    fn non_finite_is_refused() {
        let t = Tensor::<f32>::from_vec(&[1], vec![f32::NAN]).unwrap();
        assert!(matches!(encode_tensor(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn bad_version_and_dtype() {
        let t = Tensor::<f32>::zeros(&[1]);
        let mut b = encode_tensor(&t).unwrap();
        b[4] = 9;
        assert!(decode_tensor::<f32>(&b, Path::new("x")).unwrap_err().to_string().contains("version 9"));
        b[4] = 1;
        b[6] = 7;
        assert!(decode_tensor::<f32>(&b, Path::new("x")).unwrap_err().to_string().contains("dtype"));
    }
}
