//! Grayscale image loading and writing.
//!
//! Pixels live as f64 in [0, 1]. Supported on disk: binary PGM (P5, 8- or
//! 16-bit) and grayscale PNG (8- or 16-bit).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MamaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, values in [0, 1].
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| MamaError::io(path.display().to_string(), e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, path)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes, path)
    } else {
        Err(MamaError::Input(format!(
            "{}: not a P5 PGM or PNG file",
            path.display()
        )))
    }
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |m: &str| MamaError::Input(format!("{}: {m}", path.display()));
    // header: P5 <width> <height> <maxval> then a single whitespace byte
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed PGM header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("malformed PGM header"))?;
    }
    pos += 1; // single whitespace after maxval
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("PGM maxval out of range"));
    }
    let two_byte = maxval > 255;
    let need = width * height * if two_byte { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(bad("truncated PGM pixel data"));
    }
    let mut pixels = Vec::with_capacity(width * height);
    let scale = 1.0 / maxval as f64;
    if two_byte {
        for chunk in bytes[pos..pos + need].chunks_exact(2) {
            // 16-bit PGM samples are big-endian
            let v = u16::from_be_bytes([chunk[0], chunk[1]]);
            pixels.push(v as f64 * scale);
        }
    } else {
        for &b in &bytes[pos..pos + need] {
            pixels.push(b as f64 * scale);
        }
    }
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |m: String| MamaError::Input(format!("{}: {m}", path.display()));
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| bad(format!("PNG decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(format!("PNG decode: {e}")))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(bad(format!(
            "PNG color type {:?} is not grayscale",
            info.color_type
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(width * height);
    match info.bit_depth {
        png::BitDepth::Eight => {
            for &b in buf[..info.buffer_size()].iter() {
                pixels.push(b as f64 / 255.0);
            }
        }
        png::BitDepth::Sixteen => {
            for chunk in buf[..info.buffer_size()].chunks_exact(2) {
                let v = u16::from_be_bytes([chunk[0], chunk[1]]);
                pixels.push(v as f64 / 65535.0);
            }
        }
        other => return Err(bad(format!("unsupported PNG bit depth {other:?}"))),
    }
    if pixels.len() != width * height {
        return Err(bad("PNG pixel count mismatch".into()));
    }
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

/// Write an 8-bit binary PGM; values are clamped and scaled by 255.
pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(image.pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)
        .expect("in-memory write cannot fail");
    for &p in &image.pixels {
        out.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out).map_err(|e| MamaError::io(path.display().to_string(), e))
}
