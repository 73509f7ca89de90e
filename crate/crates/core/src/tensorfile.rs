//! Binary tensor container: `MRFT` magic, version, dtype, dims, a JSON header
//! and a little-endian row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{MrfError, Result};

pub const MAGIC: &[u8; 4] = b"MRFT";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    C64 = 2,
    C128 = 3,
    I64 = 4,
    U8 = 5,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::C64 | DType::I64 => 8,
            DType::C128 => 16,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::C64,
            3 => DType::C128,
            4 => DType::I64,
            5 => DType::U8,
            _ => return Err(MrfError::Format(format!("unknown dtype code {code}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub header: Value,
    pub payload: Vec<u8>,
}

macro_rules! typed {
    ($from:ident, $to:ident, $t:ty, $dt:expr, $n:expr, |$v:ident, $buf:ident| $enc:expr, |$c:ident| $dec:expr) => {
        pub fn $from(dims: &[usize], values: &[$t], header: Value) -> Result<Self> {
            let mut payload = Vec::with_capacity(values.len() * $dt.size());
            for $v in values {
                let $buf = &mut payload;
                $enc;
            }
            Self::new($dt, dims, header, payload)
        }

        pub fn $to(&self) -> Result<Vec<$t>> {
            self.expect($dt)?;
            Ok(self.payload.chunks_exact($n).map(|$c| $dec).collect())
        }
    };
}

fn f32_at(c: &[u8]) -> f32 {
    f32::from_le_bytes(c.try_into().expect("4 bytes"))
}

fn f64_at(c: &[u8]) -> f64 {
    f64::from_le_bytes(c.try_into().expect("8 bytes"))
}

impl TensorFile {
    pub fn new(dtype: DType, dims: &[usize], header: Value, payload: Vec<u8>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(MrfError::Format(format!("{} dimensions exceed the format limit", dims.len())));
        }
        let expected = dims.iter().product::<usize>() * dtype.size();
        if payload.len() != expected {
            return Err(MrfError::Format(format!("payload has {} bytes, dims {dims:?} need {expected}", payload.len())));
        }
        Ok(TensorFile {
            dtype,
            dims: dims.iter().map(|&d| d as u64).collect(),
            header,
            payload,
        })
    }

    fn expect(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(MrfError::Format(format!("tensor holds {:?}, expected {dtype:?}", self.dtype)));
        }
        Ok(())
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    typed!(from_f32, to_f32, f32, DType::F32, 4, |v, b| b.extend_from_slice(&v.to_le_bytes()), |c| f32_at(c));
    typed!(from_f64, to_f64, f64, DType::F64, 8, |v, b| b.extend_from_slice(&v.to_le_bytes()), |c| f64_at(c));
    typed!(from_i64, to_i64, i64, DType::I64, 8, |v, b| b.extend_from_slice(&v.to_le_bytes()), |c| i64::from_le_bytes(c.try_into().expect("8 bytes")));
    typed!(from_u8, to_u8, u8, DType::U8, 1, |v, b| b.push(*v), |c| c[0]);
    typed!(
        from_c64, to_c64, Complex32, DType::C64, 8,
        |v, b| {
            b.extend_from_slice(&v.re.to_le_bytes());
            b.extend_from_slice(&v.im.to_le_bytes())
        },
        |c| Complex32::new(f32_at(&c[..4]), f32_at(&c[4..]))
    );
    typed!(
        from_c128, to_c128, Complex64, DType::C128, 16,
        |v, b| {
            b.extend_from_slice(&v.re.to_le_bytes());
            b.extend_from_slice(&v.im.to_le_bytes())
        },
        |c| Complex64::new(f64_at(&c[..8]), f64_at(&c[8..]))
    );

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON values serialize");
        let mut out = Vec::with_capacity(7 + 8 * self.dims.len() + 4 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(MrfError::Format("truncated tensor file".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(4)? != MAGIC {
            return Err(MrfError::Format("bad magic, not a tensor file".into()));
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(MrfError::Format(format!("unsupported tensor file version {version}")));
        }
        let dtype = DType::from_code(take(1)?[0])?;
        let ndim = take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let header: Value = serde_json::from_slice(take(hlen)?)?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(dtype.size() as u64))
            .ok_or_else(|| MrfError::Format("tensor dims overflow".into()))?;
        let payload = take(count as usize)?.to_vec();
        if !r.is_empty() {
            return Err(MrfError::Format(format!("{} trailing bytes after payload", r.len())));
        }
        Ok(TensorFile { dtype, dims, header, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// SHA-256 of dtype, dims and payload (the header is excluded).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.dtype as u8]);
        for d in &self.dims {
            h.update(d.to_le_bytes());
        }
        h.update(&self.payload);
        hex::encode(h.finalize())
    }

    pub fn header_str(&self, key: &str) -> Option<&str> {
        self.header.get(key).and_then(Value::as_str)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_f64s(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn layout_is_bit_exact() {
        let t = TensorFile::from_f32(&[2], &[1.0, -2.5], json!({"a": 1})).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"MRFT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 1);
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[15..19], &7u32.to_le_bytes());
        assert_eq!(&b[19..26], br#"{"a":1}"#);
        assert_eq!(&b[26..30], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn round_trip_every_dtype() {
        let h = json!({"kind": "test", "nested": {"x": [1, 2]}});
        let c = [Complex64::new(1.5, -2.0), Complex64::new(0.0, 3.25)];
        let t = TensorFile::from_c128(&[1, 2], &c, h.clone()).unwrap();
        let back = TensorFile::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_c128().unwrap(), c);
        assert_eq!(back.header, h);

        let c32 = [Complex32::new(1.0, 2.0)];
        assert_eq!(TensorFile::from_bytes(&TensorFile::from_c64(&[1], &c32, h.clone()).unwrap().to_bytes()).unwrap().to_c64().unwrap(), c32);
        let f = [1.0, f64::MIN_POSITIVE, -0.0];
        assert_eq!(TensorFile::from_f64(&[3], &f, Value::Null).unwrap().to_f64().unwrap(), f);
        let i = [i64::MIN, 0, 7];
        assert_eq!(TensorFile::from_i64(&[3], &i, Value::Null).unwrap().to_i64().unwrap(), i);
        let u = [0u8, 255];
        assert_eq!(TensorFile::from_u8(&[2], &u, Value::Null).unwrap().to_u8().unwrap(), u);
        assert!(TensorFile::from_u8(&[2], &u, Value::Null).unwrap().to_f32().is_err());
    }

    #[test]
    fn corrupt_input_rejected() {
        let t = TensorFile::from_f64(&[2, 2], &[0.0; 4], Value::Null).unwrap();
        let b = t.to_bytes();
        assert!(TensorFile::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(TensorFile::from_bytes(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(TensorFile::from_bytes(&magic).is_err());
        let mut dt = b;
        dt[5] = 9;
        assert!(TensorFile::from_bytes(&dt).is_err());
        assert!(TensorFile::from_f64(&[3], &[0.0; 2], Value::Null).is_err());
    }

    #[test]
    fn content_hash_ignores_header() {
        let a = TensorFile::from_f32(&[1], &[1.0], json!({"x": 1})).unwrap();
        let b = TensorFile::from_f32(&[1], &[1.0], json!({"x": 2})).unwrap();
        let c = TensorFile::from_f32(&[1], &[2.0], json!({"x": 1})).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
