//! Planar line images with values in `[0, 1]` (1 = white paper).

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image I/O: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Channel-major (CHW) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(RasterError::Invalid(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(RasterError::Invalid(format!("{} values for {channels}x{height}x{width}", data.len())));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "image dimensions must be positive");
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample of channel `c` at real coordinates, replicating
    /// edge pixels outside the image.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f32 {
        let clamp = |v: f64, hi: usize| v.max(0.0).min((hi - 1) as f64);
        let (x, y) = (clamp(x, self.width), clamp(y, self.height));
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Replicates a single channel into RGB; other images are returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels != 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image { channels: 3, height: self.height, width: self.width, data }
    }

    /// Luma of an RGB image; single-channel images are returned as is.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| {
                if self.channels == 3 {
                    let (r, g, b) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
                    // Equal channels come back exactly.
                    if r == g && g == b {
                        r
                    } else {
                        LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
                    }
                } else {
                    (0..self.channels).map(|c| self.data[c * n + i]).sum::<f32>() / self.channels as f32
                }
            })
            .collect();
        Image { channels: 1, height: self.height, width: self.width, data }
    }

    pub fn with_channels(&self, channels: usize) -> Image {
        match channels {
            1 => self.to_gray(),
            3 => self.to_rgb(),
            _ => panic!("unsupported channel count {channels}"),
        }
    }

    /// Extends to `width` columns with `fill`; never crops.
    pub fn pad_right(&self, width: usize, fill: f32) -> Image {
        if width <= self.width {
            return self.clone();
        }
        let mut out = Image::filled(self.channels, self.height, width, fill);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = &self.data[(c * self.height + y) * self.width..][..self.width];
                out.data[(c * self.height + y) * width..][..self.width].copy_from_slice(src);
            }
        }
        out
    }

    pub fn quantize(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Hex SHA-256 of the 8-bit quantized pixels, prefixed by the dimensions.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.channels, self.height, self.width] {
            h.update((d as u32).to_le_bytes());
        }
        h.update(self.quantize());
        hex::encode(h.finalize())
    }

    /// Writes an 8-bit grayscale or RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let q = self.quantize();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => GrayImage::from_raw(w, h, q).expect("size").save(path)?,
            3 => {
                let n = self.height * self.width;
                let interleaved = (0..n).flat_map(|i| [q[i], q[n + i], q[2 * n + i]]).collect();
                RgbImage::from_raw(w, h, interleaved).expect("size").save(path)?
            }
            c => return Err(RasterError::Invalid(format!("cannot save {c}-channel image"))),
        }
        Ok(())
    }

    /// Reads a PNG as grayscale unless it has color.
    pub fn load_png(path: &Path) -> Result<Image, RasterError> {
        let img = image::open(path)?;
        if img.color().has_color() {
            Ok(Self::from_rgb8(&img.to_rgb8()))
        } else {
            Ok(Self::from_gray8(&img.to_luma8()))
        }
    }

    pub fn from_gray8(img: &ImageBuffer<Luma<u8>, Vec<u8>>) -> Image {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image { channels: 1, height: img.height() as usize, width: img.width() as usize, data }
    }

    pub fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        let mut data = vec![0.0; 3 * w * h];
        for i in 0..w * h {
            for c in 0..3 {
                data[c * w * h + i] = raw[3 * i + c] as f32 / 255.0;
            }
        }
        Image { channels: 3, height: h, width: w, data }
    }
}

/// Stacks equally sized images into an `[N, C, H, W]` tensor.
pub fn stack(images: &[Image]) -> Tensor {
    let first = &images[0];
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        assert_eq!(
            (img.channels, img.height, img.width),
            (first.channels, first.height, first.width),
            "stacked images must share a shape"
        );
        data.extend(img.data.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![images.len(), first.channels, first.height, first.width], data).expect("positive dims")
}
