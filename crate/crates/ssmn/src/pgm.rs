//! Binary PGM (P5) reading and writing, 8-bit only.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SsmnError};
use crate::imaging::GrayImage;

const MAX_DIM: usize = 1 << 15;

/// Parse a P5 raster from bytes. Header tokens may be separated by any
/// whitespace and `#` comments; exactly one whitespace byte separates the
/// maxval from the pixel data.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(SsmnError::Data("PGM: missing P5 magic".into()));
    }
    pos += 2;
    let width = read_header_int(bytes, &mut pos)?;
    let height = read_header_int(bytes, &mut pos)?;
    let maxval = read_header_int(bytes, &mut pos)?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(SsmnError::Data(format!(
            "PGM: unsupported dimensions {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(SsmnError::Data(format!(
            "PGM: unsupported maxval {maxval} (8-bit only)"
        )));
    }
    // single whitespace byte after maxval
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(SsmnError::Data("PGM: missing separator after maxval".into())),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| SsmnError::Data("PGM: dimension overflow".into()))?;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| SsmnError::Data("PGM: truncated pixel data".into()))?;
    let scale = maxval as f64;
    let pixels = data.iter().map(|&b| (b as f64 / scale).min(1.0)).collect();
    GrayImage::from_pixels(width, height, pixels)
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // skip whitespace and comments
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start || *pos - start > 8 {
        return Err(SsmnError::Data("PGM: malformed header integer".into()));
    }
    let s = std::str::from_utf8(&bytes[start..*pos]).expect("digits are utf8");
    s.parse::<usize>()
        .map_err(|e| SsmnError::Data(format!("PGM: bad integer: {e}")))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_pgm(&buf)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(img))?;
    Ok(())
}
