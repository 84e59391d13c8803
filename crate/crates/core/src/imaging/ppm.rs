//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use super::{clamp_unit, Image, ImageError, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::MalformedHeader(format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(ImageError::MalformedHeader("missing P6 magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Dimensions { height, width });
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(ImageError::MalformedHeader(
                "expected a single whitespace byte after maxval".into(),
            ))
        }
    }
    let expected = width * height * 3;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let pixels = payload[..expected]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Image::new(height, width, pixels)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + image.pixels().len());
    out.extend_from_slice(header.as_bytes());
    out.extend(
        image
            .pixels()
            .iter()
            .map(|&v| (clamp_unit(v) * 255.0).round() as u8),
    );
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_ppm(&bytes)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn comments_in_header() {
        let img = decode_ppm(b"P6 # made by hand\n2 # w\n1\n255\n\x00\x00\x00\xff\xff\xff").unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.get(0, 1), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn short_payload_is_an_error() {
        let err = decode_ppm(b"P6\n1 1\n255\n\xff\x00").unwrap_err();
        assert!(matches!(err, ImageError::Truncated { expected: 3, actual: 2 }));
    }

    #[test]
    fn rejects_sixteen_bit() {
        let err = decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap_err();
        assert!(matches!(err, ImageError::UnsupportedMaxval(65535)));
    }

    #[test]
    fn rejects_other_magic() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n0 0 0"),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(matches!(decode_ppm(b"P6\n1"), Err(ImageError::MalformedHeader(_))));
    }

    #[test]
    fn quantized_values_round_trip_exactly() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(4 * 5 * 3).collect();
        let mut file = b"P6\n5 4\n255\n".to_vec();
        file.extend_from_slice(&bytes);
        let img = decode_ppm(&file).unwrap();
        assert_eq!(encode_ppm(&img), file);
    }
}
