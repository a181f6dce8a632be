//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Interleaved samples: 3 per pixel for PPM, 1 for PGM.
    pub data: Vec<u8>,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)).map_err(Error::at(path))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(Error::at(path))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    decode(&fs::read(path).map_err(Error::at(path))?, b"P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    decode(&fs::read(path).map_err(Error::at(path))?, b"P5", 1)
}

pub fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Raster> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format("netpbm", format!("expected {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and '#' comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("netpbm", "bad header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format("netpbm", format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte ends the header.
    pos += 1;
    let len = width * height * channels;
    let data = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::format("netpbm", "truncated pixel data"))?
        .to_vec();
    Ok(Raster { width, height, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let r = decode(bytes, b"P5", 1).unwrap();
        assert_eq!((r.width, r.height, r.data.as_slice()), (2, 1, &[0u8, 255][..]));
    }

    #[test]
    fn roundtrip_ppm() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| v as u8 * 10).collect();
        let r = decode(&encode_ppm(3, 2, &rgb), b"P6", 3).unwrap();
        assert_eq!((r.width, r.height), (3, 2));
        assert_eq!(r.data, rgb);
    }

    #[test]
    fn rejects_truncation_and_wrong_magic() {
        assert!(decode(b"P6\n2 2\n255\n\x00", b"P6", 3).is_err());
        assert!(decode(&encode_pgm(1, 1, &[0]), b"P6", 3).is_err());
    }
}
