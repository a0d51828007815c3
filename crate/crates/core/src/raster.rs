//! Minimal 8-bit RGB / grayscale image buffers and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png decode error on {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("png encode error on {path}: {msg}")]
    Encode { path: String, msg: String },
}

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&c);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Rgb {
        let o = 3 * idx;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, c: Rgb) {
        let o = 3 * idx;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let (width, height, color, bytes) = read_png(path)?;
        let data = match color {
            png::ColorType::Rgb => bytes,
            png::ColorType::Rgba => bytes
                .chunks_exact(4)
                .flat_map(|c| [c[0], c[1], c[2]])
                .collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
            other => {
                return Err(RasterError::Decode {
                    path: path.display().to_string(),
                    msg: format!("unsupported color type {other:?}"),
                })
            }
        };
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Writes a boolean mask as an 8-bit grayscale PNG (0 / 255).
pub fn save_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), RasterError> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, width, height, png::ColorType::Grayscale, &bytes)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<(), RasterError> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|source| RasterError::Io {
        path: p.clone(),
        source,
    })?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let enc_err = |e: png::EncodingError| RasterError::Encode {
        path: p.clone(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>), RasterError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| RasterError::Io {
        path: p.clone(),
        source,
    })?;
    let dec_err = |e: png::DecodingError| RasterError::Decode {
        path: p.clone(),
        msg: e.to_string(),
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(dec_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| RasterError::Decode {
        path: p.clone(),
        msg: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(dec_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(RasterError::Decode {
            path: p,
            msg: format!("unsupported bit depth {:?}", info.bit_depth),
        });
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Rec. 601 luma in `[0, 255]`.
#[inline]
pub fn luminance(c: Rgb) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        for i in 0..img.pixel_count() {
            img.set(i, [i as u8, (2 * i) as u8, 255 - i as u8]);
        }
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);
    }
}
