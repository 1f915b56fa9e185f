//! Reading and writing tensors in the numpy `.npy` format.
//!
//! Versions 1.0 and 2.0 are read; 1.0 is always written. Only little-endian
//! `<f4`/`<f8` payloads in C order are supported. The writer lays the header
//! out the way numpy does: the shape is followed by growth padding and the
//! payload starts on a 64-byte boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Dtype, Tensor};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;
// numpy leaves room for the leading axis to grow without rewriting the payload.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&encode(tensor))
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses a complete npy byte image.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::MalformedHeader("missing \\x93NUMPY magic".into()));
    }
    let (header_len, prefix) = match (bytes[6], bytes[7]) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) => {
            if bytes.len() < 12 {
                return Err(Error::MalformedHeader("truncated v2.0 preamble".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        (major, minor) => {
            return Err(Error::MalformedHeader(format!(
                "unsupported format version {major}.{minor}"
            )))
        }
    };
    let data_start = prefix + header_len;
    if bytes.len() < data_start {
        return Err(Error::MalformedHeader(
            "header length exceeds file size".into(),
        ));
    }
    let text = std::str::from_utf8(&bytes[prefix..data_start])
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(Error::UnsupportedLayout);
    }
    let dtype = match header.descr.as_str() {
        "<f4" => Dtype::F32,
        "<f8" => Dtype::F64,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    if header.shape.len() > crate::tensor::MAX_RANK {
        return Err(Error::MalformedHeader(format!(
            "rank {} exceeds 4",
            header.shape.len()
        )));
    }
    let count = numel(&header.shape);
    let payload = &bytes[data_start..];
    let needed = count * dtype.size_of();
    if payload.len() != needed {
        return Err(Error::MalformedHeader(format!(
            "payload holds {} bytes, shape {:?} needs {needed}",
            payload.len(),
            header.shape
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(header.shape, data, dtype)
}

/// Serializes a tensor as an npy v1.0 byte image.
pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        tensor.dtype().descr(),
        shape_repr(tensor.shape())
    );
    let last_digits = tensor.shape().last().map_or(0, |d| d.to_string().len());
    dict.push_str(&" ".repeat(GROWTH_AXIS_MAX_DIGITS.saturating_sub(last_digits)));
    // magic + version + u16 length + dict + '\n'
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len() + tensor.len() * tensor.dtype().size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match tensor.dtype() {
        Dtype::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn shape_repr(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        _ => {
            let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

#[derive(Debug, PartialEq)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parses the python-literal dict numpy writes, e.g.
/// `{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }`.
fn parse_header(text: &str) -> Result<Header> {
    let bad = |msg: &str| Error::MalformedHeader(format!("{msg} in {:?}", text.trim_end()));
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| bad("header is not a dict"))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest).ok_or_else(|| bad("expected quoted key"))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| bad("expected ':'"))?
            .trim_start();
        let after = match key {
            "descr" => {
                let (v, after) = take_quoted(after).ok_or_else(|| bad("descr must be a string"))?;
                descr = Some(v.to_string());
                after
            }
            "fortran_order" => {
                if let Some(a) = after.strip_prefix("False") {
                    fortran_order = Some(false);
                    a
                } else if let Some(a) = after.strip_prefix("True") {
                    fortran_order = Some(true);
                    a
                } else {
                    return Err(bad("fortran_order must be True or False"));
                }
            }
            "shape" => {
                let inner = after
                    .strip_prefix('(')
                    .ok_or_else(|| bad("shape must be a tuple"))?;
                let close = inner
                    .find(')')
                    .ok_or_else(|| bad("unterminated shape tuple"))?;
                let dims = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.trim_end_matches('L')
                            .parse::<usize>()
                            .map_err(|_| bad("shape entry is not a non-negative integer"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
                &inner[close + 1..]
            }
            other => return Err(bad(&format!("unexpected key '{other}'"))),
        };
        let after = after.trim_start();
        rest = match after.strip_prefix(',') {
            Some(a) => a.trim_start(),
            None if after.is_empty() => after,
            None => return Err(bad("expected ',' between entries")),
        };
    }
    Ok(Header {
        descr: descr.ok_or_else(|| bad("missing 'descr'"))?,
        fortran_order: fortran_order.ok_or_else(|| bad("missing 'fortran_order'"))?,
        shape: shape.ok_or_else(|| bad("missing 'shape'"))?,
    })
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let inner = &s[1..];
    let end = inner.find(quote)?;
    Some((&inner[..end], &inner[end + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_npy(version: u8, dict: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[version, 0]);
        if version == 1 {
            out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&(dict.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(dict.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn minimal_tensor_layout() {
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 128 + 4);
        assert_eq!(bytes[127], b'\n');
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert!(decode(&bytes).unwrap().bit_eq(&t));
    }

    #[test]
    fn header_matches_numpy_text() {
        let t = Tensor::from_f64(vec![2, 3], vec![0.0; 6]).unwrap();
        let bytes = encode(&t);
        let text = std::str::from_utf8(&bytes[10..128]).unwrap();
        assert!(text.starts_with("{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }"));
    }

    #[test]
    fn reads_f32_2x3_bit_exact() {
        let vals: [f32; 6] = [1.5, -2.25, 3.0e-7, 4.0, 0.1, -0.0];
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = raw_npy(
            1,
            "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }\n",
            &payload,
        );
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.dtype(), Dtype::F32);
        for (a, b) in t.data().iter().zip(vals) {
            assert_eq!((*a as f32).to_bits(), b.to_bits());
        }
        assert_eq!(encode(&t)[128..], payload[..]);
    }

    #[test]
    fn reads_version_two() {
        let payload = 7.0f64.to_le_bytes();
        let bytes = raw_npy(
            2,
            "{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }\n",
            &payload,
        );
        assert_eq!(decode(&bytes).unwrap().data(), &[7.0]);
    }

    #[test]
    fn rejects_fortran_order() {
        let bytes = raw_npy(
            1,
            "{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }\n",
            &0.0f64.to_le_bytes(),
        );
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLayout));
        assert!(err.to_string().contains("unsupported layout"));
    }

    #[test]
    fn rejects_other_dtypes_and_junk() {
        for descr in ["'>f8'", "'<i4'", "'<f2'"] {
            let dict = format!("{{'descr': {descr}, 'fortran_order': False, 'shape': (1,), }}\n");
            assert!(matches!(
                decode(&raw_npy(1, &dict, &[0; 8])),
                Err(Error::UnsupportedDtype(_))
            ));
        }
        assert!(matches!(
            decode(b"not an npy file"),
            Err(Error::MalformedHeader(_))
        ));
        let truncated = raw_npy(
            1,
            "{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }\n",
            &[0; 8],
        );
        assert!(matches!(decode(&truncated), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let bytes = raw_npy(
            1,
            "{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }\n",
            &[1.0f64.to_le_bytes(), f64::INFINITY.to_le_bytes()].concat(),
        );
        assert!(matches!(
            decode(&bytes),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn zero_extent_round_trip() {
        let t = Tensor::from_f64(vec![0, 5], vec![]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len() % 64, 0);
        assert!(decode(&bytes).unwrap().bit_eq(&t));
    }

    #[test]
    fn header_parser_accepts_key_order_and_spacing() {
        let h = parse_header("{'shape':(3,4),'fortran_order':False,'descr':'<f4'}").unwrap();
        assert_eq!(h.shape, vec![3, 4]);
        assert_eq!(h.descr, "<f4");
        assert!(parse_header("{'descr': '<f4', 'shape': (1,)}").is_err());
    }
}
