//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour resample.
    pub fn resized(&self, width: usize, height: usize) -> RgbImage {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut out = RgbImage::new(width, height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                out.put(x, y, self.get(x * self.width / width, sy));
            }
        }
        out
    }
}

/// Per-channel `(v/255 − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Ppm(format!("malformed header: expected {what}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    match bytes.get(..2) {
        Some(b"P6") => {}
        Some([b'P', d]) if d.is_ascii_digit() => {
            return Err(Error::PpmVariant(format!("P{}", *d as char)));
        }
        _ => return Err(Error::Ppm("missing P6 magic".into())),
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Ppm(format!("maxval {maxval} unsupported (need 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Ppm(format!("empty image {width}x{height}")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Ppm("malformed header: no separator before pixel data".into()));
    }
    let start = cur.pos + 1;
    let need = width * height * 3;
    let data = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Ppm(format!("pixel data truncated: need {} bytes, have {}", need, bytes.len() - start)))?;
    Ok(RgbImage {
        width,
        height,
        pixels: data.to_vec(),
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    super::weights::write_atomic(path.as_ref(), &encode_ppm(img))
}

/// `3 × size × size` model input, nearest-resized when needed.
pub fn image_to_tensor(img: &RgbImage, size: usize, norm: &Normalization) -> Tensor {
    let img = img.resized(size, size);
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / (size * size), i % (size * size));
        (img.pixels[3 * p + c] as f32 / 255.0 - norm.mean[c]) / norm.std[c]
    })
}

pub fn load_image_ppm(path: impl AsRef<Path>, size: usize, norm: &Normalization) -> Result<Tensor> {
    Ok(image_to_tensor(&read_ppm(path)?, size, norm))
}
