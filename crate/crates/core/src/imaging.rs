//! Dense 2-D fields passed between pipeline stages, and their PNG codecs.
//!
//! * depth: 16-bit grayscale, value = round(depth × 65535)
//! * image: 8-bit RGB, value = round(channel × 255)
//! * mask: 8-bit grayscale, {0, 255}

use std::path::Path;

use grlb_tensor::Tensor;
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{CoreError, Result};

fn check_len(what: &str, h: usize, w: usize, per_pixel: usize, len: usize) -> Result<()> {
    if h * w * per_pixel != len {
        return Err(CoreError::Shape(format!("{what} {h}x{w} needs {} values, got {len}", h * w * per_pixel)));
    }
    Ok(())
}

/// Scalar depth field in [0, 1]; larger is farther.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("depth map", height, width, 1, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.width + j] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// [1, 1, H, W] tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let px: Vec<u16> = self.data.iter().map(|&d| (d.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, px).expect("consistent dims");
        buf.save(path).map_err(|e| CoreError::data(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        match decode(path)? {
            image::DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
                Self::new(h as usize, w as usize, data)
            }
            other => Err(CoreError::data(path, format!("expected 16-bit grayscale depth, got {:?}", other.color()))),
        }
    }
}

/// RGB image with channels in [0, 1], stored pixel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("image", height, width, 3, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> [f32; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, i: usize, j: usize, rgb: [f32; 3]) {
        let o = (i * self.width + j) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Channel-planar copy, [3, H, W] flattened.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self> {
        check_len("planar image", height, width, 3, planar.len())?;
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = planar[c * hw + p];
            }
        }
        Self::new(height, width, data)
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Quantizes to the 8-bit grid the PNG would store.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.to_rgb8().into_iter().map(|v| v as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8()).expect("consistent dims");
        buf.save(path).map_err(|e| CoreError::data(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        match decode(path)? {
            image::DynamicImage::ImageRgb8(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
                Self::new(h as usize, w as usize, data)
            }
            other => Err(CoreError::data(path, format!("expected 8-bit RGB image, got {:?}", other.color()))),
        }
    }
}

/// Binary field; `true` marks a pixel as selected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_len("mask", height, width, 1, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!(self.dims(), other.dims(), "mask dims");
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    /// Pixels in `self` but not in `other`.
    pub fn difference(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && !b)
    }

    /// 3×3 erosion; pixels outside the grid count as unselected.
    pub fn eroded(&self) -> Mask {
        let (h, w) = self.dims();
        let mut out = Mask::empty(h, w);
        for i in 0..h {
            for j in 0..w {
                if !self.get(i, j) || i == 0 || j == 0 || i + 1 == h || j + 1 == w {
                    continue;
                }
                let all = (i - 1..=i + 1).all(|a| (j - 1..=j + 1).all(|b| self.get(a, b)));
                out.set(i, j, all);
            }
        }
        out
    }

    /// 3×3 dilation.
    pub fn dilated(&self) -> Mask {
        let (h, w) = self.dims();
        let mut out = Mask::empty(h, w);
        for i in 0..h {
            for j in 0..w {
                let any = (i.saturating_sub(1)..=(i + 1).min(h - 1))
                    .any(|a| (j.saturating_sub(1)..=(j + 1).min(w - 1)).any(|b| self.get(a, b)));
                out.set(i, j, any);
            }
        }
        out
    }

    /// 0/1 values as f32, [H·W].
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let px: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, px).expect("consistent dims");
        buf.save(path).map_err(|e| CoreError::data(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        match decode(path)? {
            image::DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf.into_raw().into_iter().map(|v| v >= 128).collect();
                Self::new(h as usize, w as usize, data)
            }
            other => Err(CoreError::data(path, format!("expected 8-bit grayscale mask, got {:?}", other.color()))),
        }
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| CoreError::io(path, e))?;
    reader.decode().map_err(|e| CoreError::data(path, e.to_string()))
}
