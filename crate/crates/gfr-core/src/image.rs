//! Raw image buffers plus a small uncompressed container for fixtures.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major `(y, x, channel)` with
//! three channels throughout. The fixture container is binary PPM (`P6`,
//! maxval 255), so exported images open in ordinary viewers.

use std::path::Path;

use crate::error::{Error, Result};

pub const IMG_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * IMG_CHANNELS {
            return Err(Error::Dimension(format!(
                "image {width}x{height}x{IMG_CHANNELS} expects {} scalars, got {}",
                width * height * IMG_CHANNELS,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * IMG_CHANNELS],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * IMG_CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * IMG_CHANNELS + c] = v;
    }

    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.set(x, y, c, *v);
        }
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        [self.get(x, y, 0), self.get(x, y, 1), self.get(x, y, 2)]
    }

    /// Bilinear resample without corner alignment. Identical extents return
    /// a bit-exact copy so base-sized inputs never pass through arithmetic.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::zeros(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..IMG_CHANNELS {
                    let top = self.get(x0, y0, c) * (1.0 - wx) + self.get(x1, y0, c) * wx;
                    let bot = self.get(x0, y1, c) * (1.0 - wx) + self.get(x1, y1, c) * wx;
                    out.set(x, y, c, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Dimension(format!(
                "crop {width}x{height}@({x0},{y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Image::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                for c in 0..IMG_CHANNELS {
                    out.set(x, y, c, self.get(x0 + x, y0 + y, c));
                }
            }
        }
        Ok(out)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let mut fields = Vec::new();
        // header: magic, width, height, maxval, separated by whitespace,
        // with '#' comment lines allowed
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Corrupt("ppm: truncated header".into()));
            }
            fields.push(&bytes[start..pos]);
        }
        pos += 1; // single whitespace after maxval
        if fields[0] != b"P6" {
            return Err(Error::Format(format!(
                "ppm: expected magic P6, got {:?}",
                String::from_utf8_lossy(fields[0])
            )));
        }
        let parse = |b: &[u8]| -> Result<usize> {
            std::str::from_utf8(b)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Corrupt("ppm: bad header field".into()))
        };
        let width = parse(fields[1])?;
        let height = parse(fields[2])?;
        let maxval = parse(fields[3])?;
        if maxval != 255 {
            return Err(Error::Format(format!("ppm: unsupported maxval {maxval}")));
        }
        let need = width * height * IMG_CHANNELS;
        let raw = &bytes[pos..];
        if raw.len() < need {
            return Err(Error::Corrupt(format!(
                "ppm: expected {need} pixel bytes, found {}",
                raw.len()
            )));
        }
        let data = raw[..need].iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(width, height, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        Image::from_ppm_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_for_8bit_values() {
        let mut img = Image::zeros(3, 2);
        img.set_rgb(0, 0, [1.0, 0.0, 0.0]);
        img.set_rgb(2, 1, [0.0, 1.0, 1.0]);
        let back = Image::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_rejects_wrong_magic_and_truncation() {
        let mut img = Image::zeros(2, 2);
        img.set_rgb(0, 0, [0.5, 0.5, 0.5]);
        let mut bytes = img.to_ppm_bytes();
        bytes[1] = b'5';
        assert!(matches!(
            Image::from_ppm_bytes(&bytes),
            Err(Error::Format(_))
        ));
        let bytes = img.to_ppm_bytes();
        assert!(matches!(
            Image::from_ppm_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let mut img = Image::zeros(5, 4);
        img.set(3, 2, 1, 0.123456789);
        let same = img.resize_bilinear(5, 4);
        assert_eq!(img, same);
    }

    #[test]
    fn downscale_of_constant_image_stays_constant() {
        let mut img = Image::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set_rgb(x, y, [0.25, 0.5, 0.75]);
            }
        }
        let small = img.resize_bilinear(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(small.rgb(x, y), [0.25, 0.5, 0.75]);
            }
        }
    }
}
