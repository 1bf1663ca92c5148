//! RGB images in `[0, 1]`, PNG input/output and depth-map export.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbaImage};
use serde::Serialize;

use crate::error::{check_len, Error, Result};

/// Row-major RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `width * height * 3` values.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len("image values", width * height * 3, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = 3 * (j * self.width + i);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks(3).map(|c| [c[0], c[1], c[2]])
    }

    /// One colour plane, row-major.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Box-filter reduction by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor)
        {
            return Err(Error::invalid(
                "downsample factor",
                format!("{factor} for a {}x{} image", self.width, self.height),
            ));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = (factor * factor) as f64;
        let mut data = vec![0.0; w * h * 3];
        for j in 0..h {
            for i in 0..w {
                let mut acc = [0.0; 3];
                for dj in 0..factor {
                    for di in 0..factor {
                        let p = self.pixel(i * factor + di, j * factor + dj);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                for c in 0..3 {
                    data[3 * (j * w + i) + c] = acc[c] / norm;
                }
            }
        }
        Image::new(w, h, data)
    }

    fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let bytes = self
            .data
            .iter()
            .map(|&v| quantize(v, 255.0) as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    /// Decode a PNG, compositing any alpha channel onto `background`.
    pub fn load_png(path: &Path, background: [f64; 3]) -> Result<Image> {
        let decoded = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        let rgba: RgbaImage = decoded.to_rgba8();
        let (w, h) = rgba.dimensions();
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for p in rgba.pixels() {
            let a = p[3] as f64 / 255.0;
            for c in 0..3 {
                let v = p[c] as f64 / 255.0;
                data.push(if a == 1.0 {
                    v
                } else {
                    v * a + background[c] * (1.0 - a)
                });
            }
        }
        Image::new(w as usize, h as usize, data)
    }
}

fn quantize(v: f64, scale: f64) -> f64 {
    (v.clamp(0.0, 1.0) * scale).round()
}

#[derive(Serialize)]
struct DepthHeader {
    width: usize,
    height: usize,
    dtype: &'static str,
    near: f64,
    far: f64,
}

/// Write a depth map as a 16-bit PNG spanning `[near, far]`, plus
/// `<stem>.raw` (little-endian f32) and `<stem>.json` describing it.
pub fn save_depth(
    stem: &Path,
    depth: &[f64],
    width: usize,
    height: usize,
    near: f64,
    far: f64,
) -> Result<()> {
    check_len("depth values", width * height, depth.len())?;
    let span = (far - near).max(f64::MIN_POSITIVE);
    let levels: Vec<u16> = depth
        .iter()
        .map(|&d| quantize((d - near) / span, 65535.0) as u16)
        .collect();
    let png: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, levels).expect("buffer size");
    let png_path = stem.with_extension("png");
    png.save(&png_path).map_err(|source| Error::Image {
        path: png_path,
        source,
    })?;
    let raw: Vec<u8> = depth
        .iter()
        .flat_map(|&d| (d as f32).to_le_bytes())
        .collect();
    let raw_path = stem.with_extension("raw");
    std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let header = DepthHeader {
        width,
        height,
        dtype: "f32le",
        near,
        far,
    };
    let json_path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(&header).expect("plain struct");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}
