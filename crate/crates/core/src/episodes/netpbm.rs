//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use crate::error::IngestionError;
use crate::numerics::{Mask, Tensor};

/// A decoded raster: `channels` interleaved 8-bit samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize, IngestionError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IngestionError::MalformedHeader(format!("expected {what}")))
    }
}

/// Parses a P5 or P6 file; `magic` selects which one is expected.
fn parse(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Raster, IngestionError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(IngestionError::MalformedHeader(format!(
            "expected magic number {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(IngestionError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(IngestionError::MalformedHeader(format!(
            "maxval {maxval} unsupported, need 1..=255"
        )));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(IngestionError::MalformedHeader(
            "missing whitespace after maxval".into(),
        ));
    }
    let payload = &bytes[cur.pos + 1..];
    let expected = width * height * channels;
    if payload.len() < expected {
        return Err(IngestionError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u16,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Raster, IngestionError> {
    parse(bytes, b"P6", 3)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Raster, IngestionError> {
    parse(bytes, b"P5", 1)
}

/// RGB image in `[0, 1]`.
pub fn raster_to_image(r: &Raster) -> Tensor {
    let scale = f64::from(r.maxval);
    let data = r.pixels.iter().map(|&v| f64::from(v) / scale).collect();
    Tensor::new(vec![r.height, r.width, r.channels], data).expect("raster dimensions are positive")
}

/// Foreground where the sample is at least half of 255 (`v ≥ 128` at maxval 255).
pub fn raster_to_mask(r: &Raster) -> Mask {
    let maxval = u32::from(r.maxval);
    let data = r
        .pixels
        .iter()
        .map(|&v| u32::from(v) * 255 >= 128 * maxval)
        .collect();
    Mask::new(r.height, r.width, data).expect("raster dimensions are positive")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, width: usize, height: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Encodes an `H × W × 3` image with values in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let (h, w, c) = image.dims3().expect("image is rank 3");
    assert_eq!(c, 3, "PPM needs 3 channels");
    encode("P6", w, h, image.data().iter().map(|&v| quantize(v)))
}

/// Encodes a mask as P5 with foreground 255.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    encode(
        "P5",
        mask.width(),
        mask.height(),
        mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }),
    )
}
