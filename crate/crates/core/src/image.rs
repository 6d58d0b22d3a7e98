//! Single-channel images and binary PGM (P5) I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};

/// Row-major grayscale image, origin top-left, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "image pixel count",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig(format!(
                "pixel {i} = {} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v.clamp(0.0, 1.0);
    }

    /// 8-bit quantization `round(255·v)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (255.0 * v).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_pixels(width, height, pixels)
    }

    /// The image after a PGM write/read cycle.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.width, self.height, &self.to_bytes()).expect("same dims")
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 20);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("vec write");
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_pgm(data: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < data.len() {
                if data[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if data[pos] == b'#' {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("PGM", "truncated header"));
            }
            fields.push(std::str::from_utf8(&data[start..pos]).unwrap_or(""));
        }
        if fields[0] != "P5" {
            return Err(Error::format(
                "PGM",
                format!("magic {:?} is not P5", fields[0]),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format("PGM", format!("bad {what} {s:?}")))
        };
        let width = parse(fields[1], "width")?;
        let height = parse(fields[2], "height")?;
        let maxval = parse(fields[3], "maxval")?;
        if maxval != 255 {
            return Err(Error::format(
                "PGM",
                format!("maxval {maxval} (only 255 supported)"),
            ));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let raster = data.get(pos..).unwrap_or(&[]);
        if raster.len() != width * height {
            return Err(Error::format(
                "PGM",
                format!(
                    "expected {} raster bytes, found {}",
                    width * height,
                    raster.len()
                ),
            ));
        }
        Self::from_bytes(width, height, raster)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_pgm())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::decode_pgm(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(GrayImage::from_pixels(2, 1, vec![0.0, 1.5]).is_err());
        assert!(GrayImage::from_pixels(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn decodes_header_with_comment() {
        let mut data = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        data.extend([0u8, 255]);
        let img = GrayImage::decode_pgm(&data).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_wrong_magic_and_short_raster() {
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n2").is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trip_within_quantization(
            px in proptest::collection::vec(0.0f64..=1.0, 12)
        ) {
            let img = GrayImage::from_pixels(4, 3, px).unwrap();
            let back = GrayImage::decode_pgm(&img.encode_pgm()).unwrap();
            prop_assert_eq!(back.width(), 4);
            prop_assert_eq!(back.height(), 3);
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
            // second cycle is exact
            prop_assert_eq!(GrayImage::decode_pgm(&back.encode_pgm()).unwrap(), back);
        }
    }
}
