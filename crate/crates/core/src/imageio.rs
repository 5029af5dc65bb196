//! Grayscale image files: binary PGM (`P5`, maxval 255) and PNG.

use std::path::Path;

use skyalign_tensor::FeatureMap;

use crate::error::{Error, Result};

/// Encodes `values` (row-major, `width x height`) after min-max normalization
/// to `0..=255`. A constant image encodes as uniform mid-gray (128).
pub fn normalize_to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Encodes values already in `[0, 1]` without renormalizing.
pub fn unit_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, bytes))?;
    Ok(())
}

pub fn write_png(path: impl AsRef<Path>, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::Image("buffer does not match dimensions".into()))?;
    img.save(path).map_err(|e| Error::Image(e.to_string()))
}

/// Writes PGM or PNG depending on the extension (`.png` → PNG, else PGM).
pub fn write_gray(path: impl AsRef<Path>, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => write_png(path, width, height, bytes),
        _ => write_pgm(path, width, height, bytes),
    }
}

/// Parses a binary PGM with maxval ≤ 255 into a one-channel map in `[0, 1]`.
pub fn decode_pgm(buf: &[u8]) -> Result<FeatureMap> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Image(format!("unsupported magic {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Image(format!("bad PGM field `{s}`: {e}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    let body = buf.get(pos..pos + w * h).ok_or_else(|| Error::Image("truncated PGM body".into()))?;
    Ok(FeatureMap {
        channels: 1,
        height: h,
        width: w,
        data: body.iter().map(|&b| b as f64 / maxval as f64).collect(),
        level: 0,
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_pgm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_byte_exact() {
        let out = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(&out[..11], b"P5\n3 2\n255\n");
        assert_eq!(out.len(), 11 + 6);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        assert_eq!(normalize_to_bytes(&[0.3; 5]), vec![128; 5]);
    }

    #[test]
    fn maximum_maps_to_255() {
        let b = normalize_to_bytes(&[-1.0, 0.5, 3.0, 0.0]);
        assert_eq!(b[2], 255);
        assert_eq!(b[0], 0);
    }

    #[test]
    fn decode_round_trip() {
        let bytes: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let img = decode_pgm(&encode_pgm(4, 3, &bytes)).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(unit_to_bytes(&img.data), bytes);
    }
}
