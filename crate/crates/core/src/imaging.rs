//! Conversions between 8-bit RGB images, planar `[-1, 1]` float images and
//! tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, RgbImage};
use nsd_layout::ObjectLayout;

use crate::error::{Error, Result};

/// Planar RGB image (`3 x height x width`) with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbPlanes {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbPlanes {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let n = width * height;
        let mut data = Vec::with_capacity(3 * n);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self { width, height, data }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = self.data[(c * h + y as usize) * w + x as usize];
                ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Reads a `3 x H x W` or `1 x 3 x H x W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self { width: w, height: h, data })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Ok(Self { width, height, data })
    }

    /// Mean absolute difference per value.
    pub fn mean_abs_diff(&self, other: &RgbPlanes) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / self.data.len() as f64
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn resize_rgb(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    image::imageops::resize(img, width, height, FilterType::Triangle)
}

/// Placement of an arbitrary image inside a square canvas: uniform scale,
/// then offset. Canvas coordinates are `scale * source + offset`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Letterbox {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub source_width: u32,
    pub source_height: u32,
    pub size: u32,
}

impl Letterbox {
    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.offset_x, y * self.scale + self.offset_y)
    }
}

/// Fits `img` into a `size x size` canvas preserving aspect ratio, padding
/// with black.
pub fn letterbox(img: &RgbImage, size: u32) -> (RgbImage, Letterbox) {
    let (w, h) = (img.width(), img.height());
    let scale = size as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).clamp(1, size);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, size);
    let resized = if (nw, nh) == (w, h) { img.clone() } else { resize_rgb(img, nw, nh) };
    let ox = (size - nw) / 2;
    let oy = (size - nh) / 2;
    let mut canvas = RgbImage::new(size, size);
    image::imageops::replace(&mut canvas, &resized, ox as i64, oy as i64);
    let tf = Letterbox {
        scale: nw as f64 / w as f64,
        offset_x: ox as f64,
        offset_y: oy as f64,
        source_width: w,
        source_height: h,
        size,
    };
    (canvas, tf)
}

/// `K x H x W` tensor from a layout grid.
pub fn layout_tensor(layout: &ObjectLayout, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(layout.data(), (layout.channels(), layout.height(), layout.width()), &Device::Cpu)?
        .to_dtype(dtype)?)
}
