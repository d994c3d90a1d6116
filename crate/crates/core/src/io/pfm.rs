//! Portable float map: `PF` magic, dimensions, a negative scale marking
//! little-endian payload, then rows of 32-bit float RGB triples stored
//! bottom-up. Lossless for f32, which makes it the determinism-friendly
//! HDR interchange format here.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::io::{write_atomic, IoError};
use crate::radiometry::{HdrImage, ImageBuf, CHANNELS};
use crate::scalar::Scalar;

/// Serializes radiance to PFM bytes (always f32 payload).
pub fn encode<T: Scalar>(image: &HdrImage<T>) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * CHANNELS * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..CHANNELS {
                let v = image.buf().get(c, y, x).as_f64() as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn save<T: Scalar>(path: &Path, image: &HdrImage<T>) -> Result<(), IoError> {
    write_atomic(path, &encode(image))?;
    Ok(())
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String, IoError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(IoError::Format("truncated PFM header".into()));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| IoError::Format("non-ASCII PFM header".into()))?
        .to_string();
    // Consume exactly one whitespace separator after the token.
    *pos += 1;
    Ok(tok)
}

pub fn decode(bytes: &[u8]) -> Result<HdrImage<f32>, IoError> {
    let mut pos = 0usize;
    let magic = read_token(bytes, &mut pos)?;
    if magic != "PF" {
        return Err(IoError::Format(format!("expected PF magic, got {magic:?}")));
    }
    let parse = |tok: String, what: &str| {
        tok.parse::<usize>()
            .map_err(|_| IoError::Format(format!("bad PFM {what}: {tok:?}")))
    };
    let w = parse(read_token(bytes, &mut pos)?, "width")?;
    let h = parse(read_token(bytes, &mut pos)?, "height")?;
    let scale: f64 = read_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| IoError::Format("bad PFM scale".into()))?;
    if scale >= 0.0 {
        return Err(IoError::Format("big-endian PFM not supported, scale must be negative".into()));
    }
    let expected = h * w * CHANNELS * 4;
    let payload = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| IoError::Format(format!("PFM payload shorter than {expected} bytes")))?;
    let mut buf = ImageBuf::zeros(h, w);
    let mut i = 0usize;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..CHANNELS {
                let v = f32::from_le_bytes(payload[i..i + 4].try_into().expect("4-byte chunk"));
                buf.set(c, y, x, v);
                i += 4;
            }
        }
    }
    Ok(HdrImage::new(buf)?)
}

pub fn load(path: &Path) -> Result<HdrImage<f32>, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use rand::Rng;

    fn random_hdr(h: usize, w: usize) -> HdrImage<f32> {
        let mut rng = derive_rng(11, "pfm");
        HdrImage::new(ImageBuf::from_fn(h, w, |_, _, _| rng.random_range(0.0f32..200.0))).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let img = random_hdr(7, 5);
        let back = decode(&encode(&img)).unwrap();
        let a: Vec<u32> = img.buf().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.buf().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout_is_canonical() {
        let img = random_hdr(3, 4);
        let bytes = encode(&img);
        assert!(bytes.starts_with(b"PF\n4 3\n-1.0\n"));
        assert_eq!(bytes.len(), b"PF\n4 3\n-1.0\n".len() + 3 * 4 * 3 * 4);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let mut buf = ImageBuf::zeros(2, 1);
        buf.set(0, 0, 0, 1.0f32); // top row, red
        buf.set(0, 1, 0, 2.0); // bottom row, red
        let bytes = encode(&HdrImage::new(buf).unwrap());
        let header = b"PF\n1 2\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap());
        assert_eq!(first, 2.0, "payload must start with the bottom row");
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let img = random_hdr(3, 3);
        let mut bytes = encode(&img);
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode(&bytes), Err(IoError::Format(_))));
        assert!(matches!(decode(b"P5\n1 1\n-1.0\n"), Err(IoError::Format(_))));
    }

    #[test]
    fn file_round_trip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pfm");
        let img = random_hdr(6, 9);
        save(&path, &img).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(img.buf().data(), back.buf().data());
    }
}
