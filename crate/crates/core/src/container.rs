//! File containers: portable graymaps and the flat tensor checkpoint format.
//!
//! A tensor container is a single JSON header line followed by the raw
//! payload. The header lists every tensor with its shape and the byte offset
//! of its data relative to the first payload byte. Values are little-endian
//! `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, width: usize, height: usize, plane: &[f64]) -> Result<()> {
    if plane.len() != width * height {
        return Err(Error::Shape(format!(
            "{} pixels for a {width}x{height} graymap",
            plane.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Reads an 8-bit P5 graymap, returning `(width, height, intensities)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated graymap header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5, found {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad graymap header field {s:?}")))
    };
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(Error::Format(format!("unsupported maxval {max}")));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < w * h {
        return Err(Error::Length {
            expected: w * h,
            found: payload.len(),
        });
    }
    let plane = payload[..w * h]
        .iter()
        .map(|&b| b as f64 / max as f64)
        .collect();
    Ok((w, h, plane))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
}

/// A named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for t in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += 4 * n;
    }
    let mut out = serde_json::to_vec(&Header { tensors: entries })?;
    out.push(b'\n');
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    let payload = &bytes[nl + 1..];
    header
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            let raw = payload.get(e.offset..end).ok_or(Error::Length {
                expected: end,
                found: payload.len(),
            })?;
            Ok(NamedTensor {
                name: e.name,
                shape: e.shape,
                data: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            })
        })
        .collect()
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    decode_tensors(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let plane: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write_pgm(&p, 4, 3, &plane).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in plane.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn container_layout() {
        let ts = vec![
            NamedTensor {
                name: "a".into(),
                shape: vec![2],
                data: vec![1.0, -2.0],
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![1, 1],
                data: vec![0.5],
            },
        ];
        let bytes = encode_tensors(&ts).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[..nl]).unwrap(),
            r#"{"tensors":[{"name":"a","shape":[2],"offset":0},{"name":"b","shape":[1,1],"offset":8}]}"#
        );
        assert_eq!(bytes.len(), nl + 1 + 12);
        assert_eq!(decode_tensors(&bytes).unwrap(), ts);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }
}
