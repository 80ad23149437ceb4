//! PPM decoding and the RGB -> HSV / YCbCr conversions feeding the branches.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Hsv,
    #[serde(rename = "ycbcr")]
    YCbCr,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 3] = [ColorSpace::Rgb, ColorSpace::Hsv, ColorSpace::YCbCr];

    /// Lower-case identifier used in tensor names and config files.
    pub fn key(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::Hsv => "hsv",
            ColorSpace::YCbCr => "ycbcr",
        }
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorSpace::Rgb => "RGB",
            ColorSpace::Hsv => "HSV",
            ColorSpace::YCbCr => "YCbCr",
        })
    }
}

/// Interleaved 3-channel 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    space: ColorSpace,
    pixels: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, space: ColorSpace, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!(
                "image extent {width}x{height} must be positive"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(ColorImage {
            width,
            height,
            space,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Encodes an RGB image as binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        self.expect_space(ColorSpace::Rgb)?;
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        Ok(out)
    }

    fn expect_space(&self, expected: ColorSpace) -> Result<()> {
        if self.space != expected {
            return Err(Error::Space {
                expected: expected.to_string(),
                found: self.space.to_string(),
            });
        }
        Ok(())
    }

    fn map_pixels(&self, space: ColorSpace, f: impl Fn([u8; 3]) -> [u8; 3]) -> ColorImage {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for px in self.pixels.chunks_exact(3) {
            pixels.extend_from_slice(&f([px[0], px[1], px[2]]));
        }
        ColorImage {
            width: self.width,
            height: self.height,
            space,
            pixels,
        }
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

/// Decodes a binary PPM (`P6`) with maxval 255 into an RGB image.
pub fn load_ppm(bytes: &[u8]) -> Result<ColorImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Parse {
            offset: 0,
            reason: "missing P6 magic".into(),
        });
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_whitespace_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            reason: format!("unsupported maxval {maxval}, only 255 is accepted"),
        });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected a single whitespace byte after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(cur.err(format!("image extent {width}x{height} must be positive")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| cur.err("image extent overflows"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            reason: format!(
                "truncated payload: need {need} bytes, found {}",
                payload.len()
            ),
        });
    }
    ColorImage::new(width, height, ColorSpace::Rgb, payload[..need].to_vec())
}

/// `num/den` rounded half away from zero and clamped to a byte; `den > 0`.
fn round_to_byte(num: i64, den: i64) -> u8 {
    let q = if num >= 0 {
        (2 * num + den) / (2 * den)
    } else {
        -((den - 2 * num) / (2 * den))
    };
    q.clamp(0, 255) as u8
}

/// Hexcone HSV for one pixel with every channel scaled to `0..=255`.
///
/// Computed in exact integer arithmetic so ties round half away from zero.
pub fn hsv_pixel([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (r as i64, g as i64, b as i64);
    let max = r.max(g).max(b);
    let delta = max - r.min(g).min(b);
    // hue in degrees is 60 * sector / delta
    let sector = if delta == 0 {
        0
    } else if max == r {
        (g - b).rem_euclid(6 * delta)
    } else if max == g {
        (b - r) + 2 * delta
    } else {
        (r - g) + 4 * delta
    };
    let h = if delta == 0 {
        0
    } else {
        round_to_byte(60 * sector * 255, 360 * delta)
    };
    let s = if max == 0 {
        0
    } else {
        round_to_byte(255 * delta, max)
    };
    [h, s, max as u8]
}

/// Full-range BT.601 YCbCr for one pixel, coefficients in millionths.
pub fn ycbcr_pixel([r, g, b]: [u8; 3]) -> [u8; 3] {
    const ONE: i64 = 1_000_000;
    let (r, g, b) = (r as i64, g as i64, b as i64);
    let y = 299_000 * r + 587_000 * g + 114_000 * b;
    let cb = 128 * ONE - 168_736 * r - 331_264 * g + 500_000 * b;
    let cr = 128 * ONE + 500_000 * r - 418_688 * g - 81_312 * b;
    [
        round_to_byte(y, ONE),
        round_to_byte(cb, ONE),
        round_to_byte(cr, ONE),
    ]
}

pub fn rgb_to_hsv(img: &ColorImage) -> Result<ColorImage> {
    img.expect_space(ColorSpace::Rgb)?;
    Ok(img.map_pixels(ColorSpace::Hsv, hsv_pixel))
}

pub fn rgb_to_ycbcr(img: &ColorImage) -> Result<ColorImage> {
    img.expect_space(ColorSpace::Rgb)?;
    Ok(img.map_pixels(ColorSpace::YCbCr, ycbcr_pixel))
}

/// Converts an RGB image into the requested branch color space.
pub fn convert(img: &ColorImage, target: ColorSpace) -> Result<ColorImage> {
    match target {
        ColorSpace::Rgb => {
            img.expect_space(ColorSpace::Rgb)?;
            Ok(img.clone())
        }
        ColorSpace::Hsv => rgb_to_hsv(img),
        ColorSpace::YCbCr => rgb_to_ycbcr(img),
    }
}

/// Channel-major `[3,H,W]` tensor with values divided by 255.
pub fn image_to_tensor(img: &ColorImage) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image extents are positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_minimal() {
        let img = load_ppm(b"P6\n1 1\n255\n\0\0\0").unwrap();
        assert_eq!(
            (img.width(), img.height(), img.space()),
            (1, 1, ColorSpace::Rgb)
        );
        assert_eq!(img.pixels(), &[0, 0, 0]);
    }

    #[test]
    fn ppm_two_pixels_with_comment() {
        let mut bytes = b"P6 # comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let img = load_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        assert_eq!(img.pixel(1, 0), [0, 255, 0]);
        assert_eq!(load_ppm(&img.to_ppm().unwrap()).unwrap(), img);
    }

    #[test]
    fn ppm_rejections() {
        assert!(matches!(
            load_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::Parse { offset: 7, .. })
        ));
        assert!(matches!(
            load_ppm(b"P3\n1 1\n255\n0 0 0"),
            Err(Error::Parse { offset: 0, .. })
        ));
        match load_ppm(b"P6\n2 2\n255\n\0\0\0") {
            Err(Error::Parse { offset, reason }) => {
                assert_eq!(offset, 14);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hsv_examples() {
        assert_eq!(hsv_pixel([128, 128, 128]), [0, 0, 128]);
        assert_eq!(hsv_pixel([255, 0, 0]), [0, 255, 255]);
        // H = 60*(4 - 128/255) = 209.882..., scaled 148.67 -> 149
        assert_eq!(hsv_pixel([0, 128, 255]), [149, 255, 255]);
    }

    #[test]
    fn ycbcr_examples() {
        assert_eq!(ycbcr_pixel([0, 0, 0]), [0, 128, 128]);
        assert_eq!(ycbcr_pixel([255, 0, 0]), [76, 85, 255]);
        for g in 0..=255u8 {
            assert_eq!(ycbcr_pixel([g, g, g]), [g, 128, 128]);
            let hsv = hsv_pixel([g, g, g]);
            assert_eq!((hsv[1], hsv[2]), (0, g));
        }
    }

    #[test]
    fn conversions_check_source_space() {
        let img = ColorImage::new(1, 1, ColorSpace::Rgb, vec![1, 2, 3]).unwrap();
        let hsv = rgb_to_hsv(&img).unwrap();
        assert_eq!(hsv.space(), ColorSpace::Hsv);
        assert!(matches!(rgb_to_ycbcr(&hsv), Err(Error::Space { .. })));
        assert!(matches!(rgb_to_hsv(&hsv), Err(Error::Space { .. })));
    }

    #[test]
    fn tensor_scaling() {
        let img = ColorImage::new(2, 1, ColorSpace::Rgb, vec![0, 255, 128, 0, 0, 0]).unwrap();
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 0.0, 128.0 / 255.0, 0.0]);
        assert!((t.data()[4] - 0.50196).abs() < 1e-5);
    }
}
