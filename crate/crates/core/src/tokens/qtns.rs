//! QTNS: one tensor per file.
//!
//! Layout: magic bytes `Q T N S`, version byte (1), dtype byte
//! (1 = f32, 2 = f64), rank byte, reserved byte (0), then rank little-endian
//! u64 dims, then the row-major little-endian payload.

use crate::error::{Error, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"QTNS";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::data(format!("unknown QTNS dtype byte {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A tensor loaded from or destined for a QTNS file. Values are held as f64;
/// the dtype records the on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub struct QtnsTensor {
    pub dims: Vec<u64>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl QtnsTensor {
    pub fn f64(dims: Vec<u64>, data: Vec<f64>) -> Self {
        QtnsTensor { dims, dtype: Dtype::F64, data }
    }

    pub fn f32(dims: Vec<u64>, data: Vec<f64>) -> Self {
        QtnsTensor { dims, dtype: Dtype::F32, data }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode(t: &QtnsTensor) -> Result<Vec<u8>> {
    if t.data.len() != t.len() {
        return Err(Error::invalid(format!(
            "tensor has {} values but dims {:?} imply {}",
            t.data.len(),
            t.dims,
            t.len()
        )));
    }
    if t.dims.len() > u8::MAX as usize {
        return Err(Error::invalid("tensor rank exceeds 255"));
    }
    let mut out = Vec::with_capacity(8 + t.dims.len() * 8 + t.data.len() * t.dtype.width());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.dtype as u8);
    out.push(t.dims.len() as u8);
    out.push(0); // reserved
    for &d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.dtype {
        Dtype::F32 => {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<QtnsTensor> {
    if bytes.len() < 8 {
        return Err(Error::data("QTNS file truncated before header end"));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::data("bad QTNS magic bytes"));
    }
    if bytes[4] != VERSION {
        return Err(Error::data(format!(
            "unsupported QTNS version {} (expected {VERSION})",
            bytes[4]
        )));
    }
    let dtype = Dtype::from_byte(bytes[5])?;
    let rank = bytes[6] as usize;
    let header = 8 + rank * 8;
    if bytes.len() < header {
        return Err(Error::data("QTNS file truncated inside dims"));
    }
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[8 + k * 8..16 + k * 8]);
        dims.push(u64::from_le_bytes(raw));
    }
    let count = dims.iter().product::<u64>() as usize;
    let expected = header + count * dtype.width();
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "QTNS payload size mismatch: file has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F32 => {
            for chunk in bytes[header..].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in bytes[header..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Ok(QtnsTensor { dims, dtype, data })
}

pub fn write_file(path: &Path, t: &QtnsTensor) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<QtnsTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64_exact() {
        let t = QtnsTensor::f64(vec![2, 3], vec![1.0, -2.5, 3.25e-7, 4.0, 5.5, -0.0]);
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[0..4], b"QTNS");
        let back = decode(&bytes).unwrap();
        assert_eq!(back, t);
        // bit-exact bytes on re-encode
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn roundtrip_f32_quantizes() {
        let t = QtnsTensor::f32(vec![3], vec![1.0, 0.1, 2.0f32.powi(-30) as f64]);
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.dtype, Dtype::F32);
        assert_eq!(back.data[0], 1.0);
        assert_eq!(back.data[1], 0.1f32 as f64);
    }

    #[test]
    fn corrupted_and_truncated_files_are_rejected() {
        let t = QtnsTensor::f64(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut bytes = encode(&t).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(decode(&bytes).is_err());

        let mut bad_magic = encode(&t).unwrap();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());

        let mut bad_version = encode(&t).unwrap();
        bad_version[4] = 9;
        let err = decode(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version"), "error was: {err}");

        let mut bad_dtype = encode(&t).unwrap();
        bad_dtype[5] = 7;
        assert!(decode(&bad_dtype).is_err());
    }

    #[test]
    fn file_io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.qtns");
        let t = QtnsTensor::f64(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        write_file(&path, &t).unwrap();
        assert_eq!(read_file(&path).unwrap(), t);
    }
}
