//! Reader and writer for `.npy` array files (rank 3, C order, little-endian).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    U8,
    I16,
    F32,
    F64,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "|u1" | "<u1" | "u1" => Ok(Dtype::U8),
            "<i2" => Ok(Dtype::I16),
            "<f4" => Ok(Dtype::F32),
            "<f8" => Ok(Dtype::F64),
            other => Err(Error::format(format!("unsupported npy dtype {other:?}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Value of `key` in the header dictionary, as raw text.
fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let missing = || Error::format(format!("npy header lacks {key:?}"));
    let start = header
        .find(&format!("'{key}'"))
        .or_else(|| header.find(&format!("\"{key}\"")))
        .ok_or_else(missing)?;
    let rest = &header[start + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':').ok_or_else(missing)?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    };
    Ok(rest[..end.ok_or_else(missing)?].trim())
}

/// Parses an `.npy` byte buffer into an `(S, H, W)` tensor.
pub fn parse_npy(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::format("not an npy file: bad magic"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, offset) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            let raw = bytes.get(8..12).ok_or_else(|| Error::format("npy file is truncated"))?;
            (u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize, 12)
        }
        _ => return Err(Error::format(format!("unsupported npy version {major}.{minor}"))),
    };
    let header = bytes
        .get(offset..offset + header_len)
        .ok_or_else(|| Error::format("npy file is truncated"))?;
    let header = std::str::from_utf8(header).map_err(|_| Error::format("npy header is not text"))?;

    let dtype = Dtype::parse(header_field(header, "descr")?.trim_matches(['\'', '"']))?;
    if header_field(header, "fortran_order")? != "False" {
        return Err(Error::format("Fortran-ordered npy arrays are not supported"));
    }
    let shape_text = header_field(header, "shape")?;
    let dims = shape_text
        .trim_matches(['(', ')'])
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::format(format!("bad npy shape {shape_text}"))))
        .collect::<Result<Vec<_>>>()?;
    if dims.len() != 3 {
        return Err(Error::shape("npy", format!("expected a rank-3 volume, got shape {dims:?}")));
    }

    let count: usize = dims.iter().product();
    let payload = &bytes[offset + header_len..];
    if payload.len() < count * dtype.size() {
        return Err(Error::format("npy file is truncated"));
    }
    let payload = &payload[..count * dtype.size()];
    let data: Vec<f32> = match dtype {
        Dtype::U8 => payload.iter().map(|v| *v as f32).collect(),
        Dtype::I16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("npy volume contains non-finite values"));
    }
    Tensor::from_vec(dims, data).map_err(|e| Error::format(e.to_string()))
}

/// Encodes a tensor as a version 1.0 `<f4` npy buffer.
pub fn encode_npy(t: &Tensor<f32>) -> Vec<u8> {
    let shape: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
    let shape = if shape.len() == 1 { format!("{},", shape[0]) } else { shape.join(", ") };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({shape}), }}");
    // Pad so that the payload starts on a 64-byte boundary.
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + t.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    parse_npy(&std::fs::read(path)?)
}

pub fn write_npy(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_npy(t))?;
    Ok(())
}
