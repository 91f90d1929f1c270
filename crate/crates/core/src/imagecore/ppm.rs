//! Binary PPM (P6) for RGB and PGM (P5) for grayscale, maxval 255.

use std::path::Path;

use super::{Image, Shape};
use crate::error::{Error, Result};

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let shape = image.shape();
    let magic = if shape.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    let plane = shape.plane();
    out.reserve(shape.len());
    for i in 0..plane {
        for c in 0..shape.channels {
            let v = image.data()[c * plane + i];
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

pub fn save_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), encode_ppm(image)).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_ppm(&bytes)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format {
                offset: start,
                message: "expected a header number".into(),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start,
                message: "header number out of range".into(),
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: "expected P5 or P6 magic".into(),
            })
        }
    };
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number()?;
    let height = rd.number()?;
    let maxval = rd.number()?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: rd.pos,
            message: format!("unsupported maxval {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::Format {
            offset: rd.pos,
            message: "zero image dimension".into(),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => {
            return Err(Error::Format {
                offset: rd.pos,
                message: "missing whitespace after header".into(),
            })
        }
    }
    let shape = Shape::new(height, width, channels);
    let raster = &bytes[rd.pos..];
    if raster.len() != shape.len() {
        return Err(Error::Format {
            offset: rd.pos,
            message: format!("raster has {} bytes, expected {}", raster.len(), shape.len()),
        });
    }
    let plane = shape.plane();
    let mut data = vec![0.0; shape.len()];
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = raster[i * channels + c] as f64 / 255.0;
        }
    }
    Ok(Image::from_valid(shape, data))
}
