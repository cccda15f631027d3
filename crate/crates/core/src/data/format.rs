//! Binary tensor (`DOVT`) and model (`DOVM`) files.
//!
//! DOVT layout, all integers little-endian:
//!
//! | bytes        | field                              |
//! |--------------|------------------------------------|
//! | 4            | magic `DOVT`                       |
//! | 2 (u16)      | version, currently 1               |
//! | 1 (u8)       | dtype: 0 = f32, 1 = f64            |
//! | 1 (u8)       | rank                               |
//! | rank x 8     | dims (u64)                         |
//! | numel x size | row-major payload                  |
//!
//! DOVM layout: magic `DOVM`, u16 version, u32 metadata length, metadata
//! JSON, u32 tensor count, then per tensor a u16 name length, the UTF-8
//! name and a DOVT blob.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{Params, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"DOVT";
pub const MODEL_MAGIC: &[u8; 4] = b"DOVM";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid contents: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<(), FormatError> {
        let got: [u8; 4] = self.take(4)?.try_into().unwrap();
        if &got != want {
            return Err(FormatError::BadMagic(got));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.push(u8::try_from(t.shape().len()).expect("rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor, FormatError> {
    r.magic(TENSOR_MAGIC)?;
    let dtype = match r.u8()? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(FormatError::BadDtype(other)),
    };
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = r.u64()?;
        shape.push(usize::try_from(d).map_err(|_| FormatError::Invalid(format!("dimension {d}")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Invalid("element count overflows".into()))?;
    let bytes = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| FormatError::Invalid("payload size overflows".into()))?;
    let payload = r.take(bytes)?;
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor, FormatError> {
    let mut r = Reader { buf, pos: 0 };
    let t = read_tensor(&mut r)?;
    if r.pos != buf.len() {
        return Err(FormatError::Invalid(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    encode_tensor(t, Dtype::F64, &mut buf);
    std::fs::write(path, buf).map_err(|e| FormatError::Io(e.to_string()))
}

pub fn load_tensor(path: &Path) -> Result<Tensor, FormatError> {
    let buf = std::fs::read(path).map_err(|e| FormatError::Io(format!("{}: {e}", path.display())))?;
    decode_tensor(&buf)
}

pub fn encode_model<M: Serialize>(metadata: &M, params: &Params) -> Result<Vec<u8>, FormatError> {
    let meta = serde_json::to_vec(metadata).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let n = u16::try_from(name.len()).map_err(|_| FormatError::Invalid("name too long".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, Dtype::F64, &mut out);
    }
    Ok(out)
}

pub fn decode_model<M: DeserializeOwned>(buf: &[u8]) -> Result<(M, Params), FormatError> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(MODEL_MAGIC)?;
    let len = r.u32()? as usize;
    let meta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| FormatError::Invalid(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| FormatError::Invalid(e.to_string()))?
            .to_string();
        params.insert(name, read_tensor(&mut r)?);
    }
    if r.pos != buf.len() {
        return Err(FormatError::Invalid(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((meta, params))
}

pub fn save_model<M: Serialize>(path: &Path, metadata: &M, params: &Params) -> Result<(), FormatError> {
    let buf = encode_model(metadata, params)?;
    std::fs::write(path, buf).map_err(|e| FormatError::Io(e.to_string()))
}

pub fn load_model<M: DeserializeOwned>(path: &Path) -> Result<(M, Params), FormatError> {
    let buf = std::fs::read(path).map_err(|e| FormatError::Io(format!("{}: {e}", path.display())))?;
    decode_model(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, Dtype::F64, &mut buf);
        assert_eq!(&buf[..4], b"DOVT");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(buf[6], 1);
        assert_eq!(buf[7], 2);
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(buf.len(), 24 + 16);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let t = Tensor::vector(&[1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        encode_tensor(&t, Dtype::F64, &mut buf);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(FormatError::BadMagic(_))));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert_eq!(decode_tensor(&bad), Err(FormatError::UnsupportedVersion(9)));

        let mut bad = buf.clone();
        bad[6] = 7;
        assert_eq!(decode_tensor(&bad), Err(FormatError::BadDtype(7)));

        assert!(matches!(decode_tensor(&buf[..buf.len() - 1]), Err(FormatError::Truncated { .. })));
        assert!(matches!(decode_tensor(&[]), Err(FormatError::Truncated { offset: 0, .. })));
    }

    #[test]
    fn f32_payload_converts_at_boundary() {
        let t = Tensor::vector(&[0.5, -1.25]);
        let mut buf = Vec::new();
        encode_tensor(&t, Dtype::F32, &mut buf);
        assert_eq!(decode_tensor(&buf).unwrap(), t);
    }

    #[test]
    fn model_round_trip() {
        let mut p = Params::new();
        p.insert("b", Tensor::vector(&[1.0]));
        p.insert("a", Tensor::zeros(&[2, 2]));
        let meta = serde_json::json!({"arch": "mlp", "seed": 4});
        let buf = encode_model(&meta, &p).unwrap();
        assert_eq!(&buf[..4], b"DOVM");
        let (m, q): (serde_json::Value, Params) = decode_model(&buf).unwrap();
        assert_eq!(m, meta);
        assert_eq!(q, p);
        assert!(matches!(
            decode_model::<serde_json::Value>(&buf[..buf.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn tensor_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            encode_tensor(&t, Dtype::F64, &mut buf);
            let back = decode_tensor(&buf).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
