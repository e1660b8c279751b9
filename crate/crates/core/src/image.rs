//! Grayscale images, inpainting masks and their binary PGM encoding.
//!
//! Pixels live in `[-1, 1]`. 8-bit files map linearly: byte `0` is `-1.0` and
//! byte `255` is `1.0`; encoding rounds half away from zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square grayscale image, row-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::Shape(format!(
                "image of side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::Data(format!("pixel {i} is not finite")));
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        Self {
            side,
            pixels: vec![value; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    /// Encodes as binary 8-bit PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| pixel_to_byte(v)).collect();
        write_pgm(self.side, self.side, &bytes)
    }

    pub fn from_pgm(data: &[u8]) -> Result<Self> {
        let (width, height, bytes) = parse_pgm(data)?;
        if width != height {
            return Err(Error::Pgm(format!("image must be square, got {width}x{height}")));
        }
        Ok(Self {
            side: width,
            pixels: bytes.iter().map(|&b| byte_to_pixel(b)).collect(),
        })
    }

    /// Image after a round trip through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        Self {
            side: self.side,
            pixels: self
                .pixels
                .iter()
                .map(|&v| byte_to_pixel(pixel_to_byte(v)))
                .collect(),
        }
    }
}

/// Binary inpainting mask: `1` = known pixel to keep, `0` = hole to fill.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    side: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(side: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != side * side {
            return Err(Error::Shape(format!(
                "mask of side {side} needs {} bits, got {}",
                side * side,
                bits.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Data(format!("mask bit {b} is not binary")));
        }
        Ok(Self { side, bits })
    }

    /// All-hole mask: unconditional generation.
    pub fn all_holes(side: usize) -> Self {
        Self {
            side,
            bits: vec![0; side * side],
        }
    }

    pub fn all_known(side: usize) -> Self {
        Self {
            side,
            bits: vec![1; side * side],
        }
    }

    /// Mask whose hole is the axis-aligned rectangle `[row0, row0+h) x [col0, col0+w)`.
    pub fn rect_hole(side: usize, row0: usize, col0: usize, h: usize, w: usize) -> Self {
        let mut bits = vec![1; side * side];
        for r in row0..(row0 + h).min(side) {
            for c in col0..(col0 + w).min(side) {
                bits[r * side + c] = 0;
            }
        }
        Self { side, bits }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_known(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn hole_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn known_count(&self) -> usize {
        self.bits.len() - self.hole_count()
    }

    /// PGM with known pixels at 255 and holes at 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b == 1 { 255 } else { 0 }).collect();
        write_pgm(self.side, self.side, &bytes)
    }

    pub fn from_pgm(data: &[u8]) -> Result<Self> {
        let (width, height, bytes) = parse_pgm(data)?;
        if width != height {
            return Err(Error::Pgm(format!("mask must be square, got {width}x{height}")));
        }
        let bits = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::Pgm(format!("mask pixel {other} is not 0 or 255"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self { side: width, bits })
    }
}

pub fn byte_to_pixel(b: u8) -> f32 {
    f32::from(b) / 255.0 * 2.0 - 1.0
}

/// Linear map to `0..=255`, rounding half away from zero, clamped.
pub fn pixel_to_byte(v: f32) -> u8 {
    let scaled = (f64::from(v) + 1.0) / 2.0 * 255.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

fn write_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// Parses a binary PGM with maxval 255, returning `(width, height, pixels)`.
pub fn parse_pgm(data: &[u8]) -> Result<(usize, usize, &[u8])> {
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(Error::Pgm("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each header token
        loop {
            match data.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while data.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Pgm("truncated header".into())),
            }
        }
        let start = pos;
        while data.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pgm("expected a decimal header field".into()));
        }
        let text = std::str::from_utf8(&data[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::Pgm(format!("header field {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Pgm(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Pgm("zero dimension".into()));
    }
    if !data.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Pgm("missing whitespace after header".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::Pgm("dimensions overflow".into()))?;
    let body = &data[pos..];
    if body.len() != need {
        return Err(Error::Pgm(format!(
            "expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok((width, height, body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_byte_survives_pixel_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(pixel_to_byte(byte_to_pixel(b)), b);
        }
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // 0.0 maps to 127.5 exactly
        assert_eq!(pixel_to_byte(0.0), 128);
        assert_eq!(pixel_to_byte(-1.0), 0);
        assert_eq!(pixel_to_byte(1.0), 255);
        assert_eq!(pixel_to_byte(7.0), 255);
    }

    #[test]
    fn pgm_bytes_round_trip() {
        let bytes: Vec<u8> = (0..16u8).map(|i| i * 17).collect();
        let pgm = write_pgm(4, 4, &bytes);
        let img = Image::from_pgm(&pgm).unwrap();
        assert_eq!(img.to_pgm(), pgm);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut data = b"P5 # made by hand\n2 2\n255\n".to_vec();
        data.extend_from_slice(&[0, 255, 255, 0]);
        let mask = Mask::from_pgm(&data).unwrap();
        assert_eq!(mask.bits(), &[0, 1, 1, 0]);
    }

    #[test]
    fn malformed_pgm_rejected() {
        assert!(matches!(Image::from_pgm(b"P6\n1 1\n255\n\0"), Err(Error::Pgm(_))));
        assert!(matches!(Image::from_pgm(b"P5\n2 2\n255\n\0"), Err(Error::Pgm(_))));
        assert!(matches!(Image::from_pgm(b"P5\n1 1\n65535\n\0\0"), Err(Error::Pgm(_))));
        assert!(matches!(Image::from_pgm(b"P5\n"), Err(Error::Pgm(_))));
    }

    #[test]
    fn mask_pgm_rejects_grey_values() {
        let mut data = b"P5\n2 2\n255\n".to_vec();
        data.extend_from_slice(&[0, 128, 255, 0]);
        assert!(Mask::from_pgm(&data).is_err());
    }

    #[test]
    fn rect_hole_counts() {
        let m = Mask::rect_hole(16, 2, 3, 4, 5);
        assert_eq!(m.hole_count(), 20);
        assert!(!m.is_known(2 * 16 + 3));
        assert!(m.is_known(0));
    }

    #[test]
    fn image_rejects_non_finite() {
        assert!(Image::new(2, vec![0.0, f32::NAN, 0.0, 0.0]).is_err());
        assert!(Image::new(2, vec![0.0; 3]).is_err());
    }
}
