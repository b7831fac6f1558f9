//! Binary PGM (P5) and PPM (P6) with 8-bit samples.
//!
//! Bytes map affinely onto the working range: `0 → -1`, `255 → +1`.

use super::{Field, Shape};
use crate::error::{Error, Result};
use std::path::Path;

#[inline]
fn byte_to_value(b: u8) -> f64 {
    2.0 * (b as f64 / 255.0) - 1.0
}

#[inline]
fn value_to_byte(v: f64) -> u8 {
    let v = v.clamp(-1.0, 1.0);
    ((v + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Field> {
    let bytes = std::fs::read(path)?;
    decode_pnm(&bytes)
}

pub fn write_image(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pnm(field)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader("unexpected end of header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::MalformedHeader("non-ascii header token".into()))
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let tok = self.token()?;
        tok.parse::<u32>()
            .map_err(|_| Error::MalformedHeader(format!("invalid {what}: '{tok}'")))
    }
}

/// Decodes a P5/P6 byte stream into a 1- or 3-channel field.
pub fn decode_pnm(bytes: &[u8]) -> Result<Field> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let channels = match cur.token()? {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::MalformedHeader(format!(
                "unsupported magic '{other}' (expected P5 or P6)"
            )))
        }
    };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader("zero image dimension".into()));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedDepth(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("missing raster separator".into()));
    }
    let raster = &bytes[cur.pos + 1..];
    let expected = width * height * channels;
    if raster.len() < expected {
        return Err(Error::MalformedHeader(format!(
            "raster has {} bytes, expected {expected}",
            raster.len()
        )));
    }
    let shape = Shape::new(channels, height, width);
    Ok(Field::from_fn(shape, |c, i1, i2| {
        byte_to_value(raster[(i1 * width + i2) * channels + c])
    }))
}

/// Encodes a 1-channel field as P5 and a 3-channel field as P6, clamping to
/// `[-1, 1]` first.
pub fn encode_pnm(field: &Field) -> Result<Vec<u8>> {
    let shape = field.shape();
    let magic = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidArgument(format!(
                "images need 1 or 3 channels, field has {c}"
            )))
        }
    };
    if !field.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut out = format!("{magic}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.reserve(shape.len());
    for i1 in 0..shape.height {
        for i2 in 0..shape.width {
            for c in 0..shape.channels {
                out.push(value_to_byte(field.get(c, i1, i2)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_endpoints() {
        assert_eq!(byte_to_value(0), -1.0);
        assert_eq!(byte_to_value(255), 1.0);
        assert!((byte_to_value(128) - 0.003921568627451).abs() < 1e-12);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# a comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 1, 2, 3]);
        let f = decode_pnm(&bytes).unwrap();
        assert_eq!(f.shape(), Shape::new(1, 2, 3));
        assert_eq!(f.get(0, 0, 1), 1.0);
    }

    #[test]
    fn sixteen_bit_is_unsupported() {
        let bytes = b"P5\n1 1\n65535\n\0\0".to_vec();
        assert!(matches!(decode_pnm(&bytes), Err(Error::UnsupportedDepth(65535))));
    }

    #[test]
    fn garbage_header_is_malformed() {
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_pnm(b"P6\nx 1\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_pnm(b"P6\n2 2\n255\n\x01"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn write_clamps_out_of_range() {
        let f = Field::from_vec(Shape::new(1, 1, 3), vec![-7.0, 0.0, 3.5]).unwrap();
        let bytes = encode_pnm(&f).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    proptest! {
        #[test]
        fn ppm_round_trip_is_byte_exact(w in 1usize..9, h in 1usize..9, seed in any::<u64>(), gray in any::<bool>()) {
            let channels = if gray { 1 } else { 3 };
            let magic = if gray { "P5" } else { "P6" };
            let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            let mut s = seed;
            for _ in 0..w * h * channels {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                bytes.push((s >> 56) as u8);
            }
            let f = decode_pnm(&bytes).unwrap();
            prop_assert_eq!(encode_pnm(&f).unwrap(), bytes);
        }
    }
}
