//! Grayscale images in [0,1] and binary PGM (P5) I/O.

use crate::error::{CapError, Result};
use std::io::{Read, Write};
use std::path::Path;

/// H×W grayscale image, row-major, every pixel in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(CapError::InvalidArgument(format!(
                "image {}x{} does not match {} pixels",
                height,
                width,
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CapError::InvalidArgument(format!(
                "pixel value {bad} outside [0,1]"
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    /// Build from a generator over (row, col), clamping into [0,1].
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        GrayImage {
            height,
            width,
            pixels,
        }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Total variation (sum of absolute horizontal+vertical differences).
    pub fn total_variation(&self) -> f64 {
        let mut tv = 0.0f64;
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c) as f64;
                if c + 1 < self.width {
                    tv += (v - self.get(r, c + 1) as f64).abs();
                }
                if r + 1 < self.height {
                    tv += (v - self.get(r + 1, c) as f64).abs();
                }
            }
        }
        tv
    }
}

/// Read a binary (P5) PGM with maxval 255. ASCII (P2) files and other
/// maxvals are rejected; `#` comment lines in the header are tolerated.
pub fn pgm_read(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes).map_err(|(offset, reason)| CapError::Parse {
        path: path.display().to_string(),
        offset,
        reason,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, (usize, String)> {
    let mut pos = 0usize;

    let skip_ws = |pos: &mut usize| {
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(*pos) {
                        *pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
    };
    let read_token = |pos: &mut usize| -> std::result::Result<usize, (usize, String)> {
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
            *pos += 1;
        }
        if *pos == start {
            return Err((start, "expected decimal integer".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .unwrap()
            .parse()
            .map_err(|e| (start, format!("bad integer: {e}")))
    };

    if bytes.get(..2) != Some(b"P5") {
        let magic = bytes
            .get(..2)
            .map(|m| String::from_utf8_lossy(m).into_owned())
            .unwrap_or_default();
        return Err((0, format!("not a binary PGM (magic {magic:?}, want \"P5\")")));
    }
    pos += 2;
    skip_ws(&mut pos);
    let width = read_token(&mut pos)?;
    skip_ws(&mut pos);
    let height = read_token(&mut pos)?;
    skip_ws(&mut pos);
    let maxval = read_token(&mut pos)?;
    if maxval != 255 {
        return Err((pos, format!("unsupported maxval {maxval}, want 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err((pos, "expected single whitespace before payload".into())),
    }
    let need = width * height;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or((bytes.len(), format!("payload truncated: need {} bytes from offset {}", need, pos)))?;
    let pixels = payload.iter().map(|&b| b as f32 / 255.0).collect();
    GrayImage::new(height, width, pixels).map_err(|e| (pos, e.to_string()))
}

/// Write a binary (P5) PGM with maxval 255; pixels quantized to round(v*255).
pub fn pgm_write(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}
