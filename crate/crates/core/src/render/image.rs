use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
}

impl RenderedImage {
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            pixels.extend(rgb.map(|c| c as f32));
        }
        Self { width, height, pixels }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Round-to-nearest 8-bit quantisation.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(width: u32, height: u32, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn write_ppm<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_u8())
    }

    pub fn read_ppm<R: BufRead>(r: &mut R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut fields = Vec::new();
        let mut token = Vec::new();
        while fields.len() < 4 {
            let mut byte = [0u8];
            r.read_exact(&mut byte)?;
            if byte[0] == b'#' {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
                continue;
            }
            if byte[0].is_ascii_whitespace() {
                if !token.is_empty() {
                    fields.push(String::from_utf8_lossy(&token).into_owned());
                    token.clear();
                }
            } else {
                token.push(byte[0]);
            }
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only 8-bit binary PPM (P6) is supported"));
        }
        let width: u32 = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: u32 = fields[2].parse().map_err(|_| bad("bad height"))?;
        let mut bytes = vec![0u8; width as usize * height as usize * 3];
        r.read_exact(&mut bytes)?;
        Ok(Self::from_u8(width, height, &bytes))
    }

    pub fn save_ppm(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()
    }

    pub fn load_ppm(path: &Path) -> io::Result<Self> {
        Self::read_ppm(&mut io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        image::save_buffer(path, &self.to_u8(), self.width, self.height, image::ExtendedColorType::Rgb8)
    }

    pub fn load_png(path: &Path) -> Result<Self, image::ImageError> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_u8(img.width(), img.height(), img.as_raw()))
    }

    /// Largest per-channel absolute difference; `None` if sizes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f32> {
        if (self.width, self.height) != (other.width, other.height) {
            return None;
        }
        Some(
            self.pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_quantizes_to_nearest() {
        let mut img = RenderedImage::filled(3, 2, [0.0, 0.5, 1.0]);
        img.set(2, 1, [0.1, 0.2, 0.3]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n3 2\n255\n"));
        let back = RenderedImage::read_ppm(&mut io::Cursor::new(buf)).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-7);
        assert_eq!(back.to_u8()[3..6], [0, 128, 255]);
    }

    #[test]
    fn png_roundtrip_is_lossless_on_quantized_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = RenderedImage::from_u8(2, 2, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 255]);
        img.save_png(&p).unwrap();
        assert_eq!(RenderedImage::load_png(&p).unwrap(), img);
    }
}
