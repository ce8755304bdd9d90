//! RGB float images, binary masks and their 8-bit PNG files.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Png { path: String, msg: String },
    #[error("image is {got:?}, expected {want:?}")]
    Size {
        got: (usize, usize),
        want: (usize, usize),
    },
}

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy with pixels outside `mask` set to black.
    pub fn masked(&self, mask: &Mask) -> Image {
        let mut out = self.clone();
        for (px, &m) in out.data.chunks_mut(3).zip(&mask.data) {
            if !m {
                px.fill(0.0);
            }
        }
        out
    }

    /// Sub-image `[x0, x1) × [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        let mut out = Image::new(x1 - x0, y1 - y0);
        for r in y0..y1 {
            for c in x0..x1 {
                out.set(c - x0, r - y0, self.get(c, r));
            }
        }
        out
    }

    /// Values rounded to 8 bits per channel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn to_png(&self) -> Vec<u8> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.to_bytes())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        write_file(path, &self.to_png())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let (w, h, bytes) = read_png(path, png::ColorType::Rgb)?;
        Ok(Self {
            width: w,
            height: h,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn to_png(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        write_file(path, &self.to_png())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let (w, h, bytes) = read_png(path, png::ColorType::Grayscale)?;
        Ok(Self {
            width: w,
            height: h,
            data: bytes.iter().map(|&b| b >= 128).collect(),
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    // writing into memory with matching sizes cannot fail
    let mut writer = enc.write_header().expect("in-memory png header");
    writer.write_image_data(bytes).expect("in-memory png data");
    writer.finish().expect("in-memory png finish");
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    std::fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| ImageError::Io {
        path: p.clone(),
        source,
    })?;
    let png_err = |msg: String| ImageError::Png {
        path: p.clone(),
        msg,
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.color_type != want || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!(
            "expected 8-bit {want:?}, found {:?} {:?}",
            info.bit_depth, info.color_type
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
