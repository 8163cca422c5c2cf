//! Binary tensor files.
//!
//! Layout: magic `RGT4\0\0\0\x01`, four little-endian `u64` extents
//! `(n, c, h, w)`, one dtype byte (4 = f32, 8 = f64), then the raw
//! little-endian values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"RGT4\0\0\0\x01";
const HEADER_LEN: usize = 8 + 4 * 8 + 1;

/// A loaded tensor of either dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor4<f32>),
    F64(Tensor4<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

pub fn encode_tensor<T: Scalar>(x: &Tensor4<T>, out: &mut Vec<u8>) {
    let s = x.shape();
    out.reserve(HEADER_LEN + x.numel() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    for d in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in x.data() {
        v.write_le(out);
    }
}

/// Decodes one record from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_any(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::LengthMismatch {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[..8] != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:02x?}",
            &bytes[..8]
        )));
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        let raw = u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
        if raw as i64 <= 0 && raw != 0 {
            return Err(Error::MalformedHeader(format!(
                "dimension {k} is negative ({})",
                raw as i64
            )));
        }
        *d = usize::try_from(raw)
            .map_err(|_| Error::MalformedHeader(format!("dimension {k} = {raw} overflows")))?;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let dtype = DType::from_tag(bytes[40])
        .ok_or_else(|| Error::MalformedHeader(format!("unknown dtype tag {}", bytes[40])))?;
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::MalformedHeader(format!("element count of {shape} overflows")))?;
    let payload = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::MalformedHeader(format!("byte count of {shape} overflows")))?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::LengthMismatch {
            expected: payload as u64,
            found: available as u64,
        });
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + payload];
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(Tensor4::new(shape, decode_values(body))?),
        DType::F64 => AnyTensor::F64(Tensor4::new(shape, decode_values(body))?),
    };
    Ok((tensor, HEADER_LEN + payload))
}

fn decode_values<T: Scalar>(body: &[u8]) -> Vec<T> {
    body.chunks_exact(T::DTYPE.size()).map(T::read_le).collect()
}

fn downcast<T: Scalar>(any: AnyTensor) -> Result<Tensor4<T>> {
    let found = any.dtype();
    if found != T::DTYPE {
        return Err(Error::DtypeMismatch {
            expected: T::DTYPE.name(),
            found: found.name(),
        });
    }
    // Same dtype, so the cast is an exact copy.
    Ok(match any {
        AnyTensor::F32(t) => t.cast(),
        AnyTensor::F64(t) => t.cast(),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_tensor<T: Scalar>(x: &Tensor4<T>, path: impl AsRef<Path>) -> Result<()> {
    save_tensors(std::slice::from_ref(x), path)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (t, used) = decode_any(&bytes)?;
    if used != bytes.len() {
        return Err(Error::LengthMismatch {
            expected: used as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(t)
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    downcast(load_any(path)?)
}

/// Writes several records back to back (checkpoint files).
pub fn save_tensors<T: Scalar>(xs: &[Tensor4<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for x in xs {
        encode_tensor(x, &mut buf);
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn load_tensors<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Tensor4<T>>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (t, used) = decode_any(&bytes[at..])?;
        out.push(downcast(t)?);
        at += used;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rgt");
        let x: Tensor4<f64> = Rng::new(3).uniform_tensor((2, 3, 4, 5), -1e3, 1e3);
        save_tensor(&x, &p).unwrap();
        assert!(load_tensor::<f64>(&p).unwrap().bit_eq(&x));

        let y: Tensor4<f32> = Rng::new(4).uniform_tensor((1, 1, 3, 1), -1.0, 1.0);
        save_tensor(&y, &p).unwrap();
        assert_eq!(load_tensor::<f32>(&p).unwrap(), y);
    }

    #[test]
    fn header_bytes_are_pinned() {
        let x = Tensor4::<f32>::new((1, 2, 1, 1), vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&x, &mut buf);
        assert_eq!(&buf[..8], b"RGT4\0\0\0\x01");
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(buf[40], 4);
        assert_eq!(&buf[41..45], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 41 + 8);
    }

    #[test]
    fn truncated_file_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rgt");
        let x: Tensor4<f64> = Tensor4::ones((1, 1, 2, 2));
        save_tensor(&x, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_tensor::<f64>(&p).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }), "{err}");
    }

    #[test]
    fn negative_dimension_is_malformed() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor4::<f64>::ones((1, 1, 1, 1)), &mut buf);
        buf[16..24].copy_from_slice(&(-3i64).to_le_bytes());
        let err = decode_any(&buf).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn bad_magic_and_dtype_are_malformed() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor4::<f64>::ones((1, 1, 1, 1)), &mut buf);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_any(&bad), Err(Error::MalformedHeader(_))));
        let mut bad = buf.clone();
        bad[40] = 2;
        assert!(matches!(decode_any(&bad), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn error_classes_have_distinct_codes() {
        let a = Error::MalformedHeader(String::new()).code();
        let b = Error::LengthMismatch {
            expected: 0,
            found: 0,
        }
        .code();
        let c = Error::Io {
            path: "x".into(),
            source: std::io::Error::other("x"),
        }
        .code();
        assert!(a != b && b != c && a != c);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_tensor::<f64>("/nonexistent/dir/x.rgt").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.rgt");
        save_tensor(&Tensor4::<f32>::ones((1, 1, 1, 1)), &p).unwrap();
        assert!(matches!(
            load_tensor::<f64>(&p),
            Err(Error::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn multi_record_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.rgt");
        let mut rng = Rng::new(9);
        let xs: Vec<Tensor4<f64>> = vec![
            rng.uniform_tensor((1, 2, 3, 4), -1.0, 1.0),
            rng.uniform_tensor((5, 1, 1, 1), -1.0, 1.0),
        ];
        save_tensors(&xs, &p).unwrap();
        assert_eq!(load_tensors::<f64>(&p).unwrap(), xs);
    }
}
