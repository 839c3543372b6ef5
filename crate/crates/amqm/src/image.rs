//! Single-channel intensity images and their on-disk form.
//!
//! Images hold real intensities in [0, 1], row-major. On disk they are
//! binary portable graymaps (magic `P5`, maxval 255), with intensities
//! quantized by `round(x * 255)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One deposited layer's top view.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image, validating the pixel-count and range invariants.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Image> {
        if pixels.len() != width * height {
            return Err(Error::domain(format!(
                "pixel count {} does not match {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        for (i, &p) in pixels.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!(
                    "pixel {i} out of range: {p}"
                )));
            }
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Image> {
        Image::new(width, height, vec![value; width * height])
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

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// 8-bit quantization used by the graymap writer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect()
    }

    /// Rounds every intensity through the 8-bit grid, giving exactly what
    /// a write/read cycle through a graymap file would produce.
    pub fn quantized(&self) -> Image {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round() / 255.0)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

/// Min-max rescale to [0, 1]. A constant image maps to all 0.5.
pub fn normalize_intensity(image: &Image) -> Result<Image> {
    if image.is_empty() {
        return Err(Error::domain("cannot normalize an empty image"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &p in image.pixels() {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    let range = hi - lo;
    let pixels = if range == 0.0 {
        vec![0.5; image.pixels.len()]
    } else {
        image
            .pixels
            .iter()
            .map(|&p| ((p - lo) / range).clamp(0.0, 1.0))
            .collect()
    };
    Ok(Image {
        width: image.width,
        height: image.height,
        pixels,
    })
}

/// Writes a binary P5 graymap via a temporary name, renaming on success.
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + image.pixels.len());
    write!(
        &mut bytes,
        "P5\n{} {}\n255\n",
        image.width(),
        image.height()
    )?;
    bytes.extend_from_slice(&image.to_bytes());
    crate::write_atomic(path, &bytes)
}

/// Reads a binary P5 graymap, dequantizing intensities by maxval.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::format(0, "expected magic \"P5\""));
    }
    let mut pos = 2usize;

    let read_token = |pos: &mut usize| -> Result<u64> {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return Err(Error::format(start as u64, "expected decimal header field"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::format(start as u64, "unparseable header field"))
    };

    let width = read_token(&mut pos)? as usize;
    let height = read_token(&mut pos)? as usize;
    let maxval = read_token(&mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            pos as u64,
            format!("unsupported maxval {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(
            pos as u64,
            "missing whitespace before raster data",
        ));
    }
    pos += 1;

    let expected = width * height;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated raster: expected {expected} bytes, found {}",
                raster.len()
            ),
        ));
    }
    if raster.len() > expected {
        return Err(Error::format(
            (pos + expected) as u64,
            format!("{} trailing bytes after raster", raster.len() - expected),
        ));
    }
    // Divide rather than multiplying by a reciprocal: n / m and
    // n * (1/m) differ in the last bit for some n, and the in-memory
    // pipeline must match disk loads exactly.
    let maxval = maxval as f64;
    let pixels = raster.iter().map(|&b| b as f64 / maxval).collect();
    Image::new(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(w: usize, h: usize) -> Image {
        let n = w * h;
        let pixels = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Image::new(w, h, pixels).unwrap()
    }

    #[test]
    fn rejects_mismatched_pixel_count() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn rejects_out_of_range_intensity() {
        assert!(Image::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.5, f64::NAN]).is_err());
    }

    #[test]
    fn normalize_is_identity_on_full_range() {
        let img = ramp_image(4, 4);
        let out = normalize_intensity(&img).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_constant_maps_to_half() {
        let img = Image::filled(3, 3, 0.3).unwrap();
        let out = normalize_intensity(&img).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn normalize_is_affine_invariant() {
        // a*x + b with a > 0 must normalize to the same output as x.
        let img = ramp_image(5, 3);
        let (a, b) = (0.4, 0.2);
        let transformed = Image::new(
            5,
            3,
            img.pixels().iter().map(|&p| a * p + b).collect(),
        )
        .unwrap();
        let n1 = normalize_intensity(&img).unwrap();
        let n2 = normalize_intensity(&transformed).unwrap();
        for (x, y) in n1.pixels().iter().zip(n2.pixels()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_empty() {
        let img = Image::new(0, 0, vec![]).unwrap();
        assert!(normalize_intensity(&img).is_err());
    }

    #[test]
    fn pgm_round_trip_is_exact_on_quantized_values() {
        let dir = std::env::temp_dir().join("amqm_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.pgm");
        let img = ramp_image(8, 5).quantized();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width(), 8);
        assert_eq!(back.height(), 5);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
        fs::remove_file(&path).ok();
    }

    #[test]
    fn pgm_header_is_exact() {
        let dir = std::env::temp_dir().join("amqm_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("header.pgm");
        write_pgm(&path, &Image::filled(3, 2, 0.0).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), "P5\n3 2\n255\n".len() + 6);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn pgm_rejects_truncation_and_bad_magic() {
        let img = ramp_image(4, 4).quantized();
        let mut bytes = Vec::new();
        write!(&mut bytes, "P5\n4 4\n255\n").unwrap();
        bytes.extend_from_slice(&img.to_bytes());
        let truncated = &bytes[..bytes.len() - 3];
        match parse_pgm(truncated) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(parse_pgm(b"P6\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn quantization_rounds_to_nearest_level() {
        let img = Image::new(2, 1, vec![0.5, 1.0]).unwrap();
        assert_eq!(img.to_bytes(), vec![128, 255]);
    }
}
