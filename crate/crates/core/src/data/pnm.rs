//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::io::Write;

use crate::error::{Error, Result};

/// Decoded 8-bit image, samples interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad {what} in image header")))
    }
}

/// Parses a P5 or P6 image with maxval ≤ 255.
pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Data("not a binary PPM (P6) or PGM (P5) image".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Data(format!("image has zero extent {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported maxval {maxval} (8-bit only)")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Data("missing whitespace after image header".into()));
    }
    let start = cur.pos + 1;
    let len = width * height * channels;
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Data(format!("truncated image: expected {len} samples, found {}", bytes.len().saturating_sub(start))))?;
    let samples = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8).collect()
    };
    Ok(Pnm { width, height, channels, samples })
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

pub fn write(path: &std::path::Path, img: &Pnm) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(img)).map_err(|e| Error::io(path, e))
}

/// `[C, H, W]` values in `[0, 1]` to 8-bit interleaved samples.
pub fn from_planar(data: &[f64], channels: usize, height: usize, width: usize) -> Pnm {
    let plane = height * width;
    let mut samples = Vec::with_capacity(plane * channels);
    for i in 0..plane {
        for ch in 0..channels {
            samples.push((data[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Pnm { width, height, channels, samples }
}
