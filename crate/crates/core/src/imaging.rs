//! In-memory raster types and their 8-bit PNG encodings.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Linear-range RGB image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

/// Per-pixel object IDs; 0 is background / unsupervised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl ColorImage {
    pub fn filled(width: u32, height: u32, value: [f64; 3]) -> Self {
        ColorImage {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        ImageBuffer::from_fn(self.width, self.height, |x, y| {
            let p = self.data[(y * self.width + x) as usize];
            Rgb(p.map(quantize))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        ColorImage {
            width: img.width(),
            height: img.height(),
            data: img
                .pixels()
                .map(|p| p.0.map(|v| v as f64 / 255.0))
                .collect(),
        }
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        ColorImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| p.map(|v| quantize(v) as f64 / 255.0))
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl LabelMap {
    pub fn new(width: u32, height: u32) -> Self {
        LabelMap {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    /// Distinct IDs present, ascending, including 0 if present.
    pub fn ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&i| seen[i as usize]).collect()
    }

    pub fn mask_of(&self, id: u8) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v == id).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img: GrayImage = ImageBuffer::from_raw(self.width, self.height, self.data.clone())
            .expect("label buffer matches dimensions");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads an 8-bit single-channel raster; other layouts are rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        match img {
            image::DynamicImage::ImageLuma8(g) => Ok(LabelMap {
                width: g.width(),
                height: g.height(),
                data: g.into_raw(),
            }),
            other => Err(Error::InvalidArgument(format!(
                "label map {} must be 8-bit single-channel, got {:?}",
                path.display(),
                other.color()
            ))),
        }
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn get(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.data[(y as usize) * self.width as usize + x as usize]
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Euclidean-disk dilation.
    pub fn dilate(&self, radius: f64) -> Mask {
        let offsets = disk_offsets(radius);
        let mut out = Mask::new(self.width, self.height);
        let w = self.width as i64;
        for y in 0..self.height as i64 {
            for x in 0..w {
                if !self.data[(y * w + x) as usize] {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < self.height as i64 {
                        out.data[(ny * w + nx) as usize] = true;
                    }
                }
            }
        }
        out
    }

    /// Euclidean-disk erosion; pixels outside the raster count as unset.
    pub fn erode(&self, radius: f64) -> Mask {
        let offsets = disk_offsets(radius);
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let idx = (y * self.width as i64 + x) as usize;
                out.data[idx] =
                    self.data[idx] && offsets.iter().all(|&(dx, dy)| self.get(x + dx, y + dy));
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let img: GrayImage = ImageBuffer::from_fn(self.width, self.height, |x, y| {
            Luma([if self.data[(y * self.width + x) as usize] { 255 } else { 0 }])
        });
        encode_png(&image::DynamicImage::ImageLuma8(img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn disk_offsets(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.max(0.0).floor() as i64;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f64 <= r2 {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub(crate) fn encode_png(img: &image::DynamicImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

pub(crate) fn decode_png(bytes: &[u8]) -> std::result::Result<image::DynamicImage, image::ImageError> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
}
