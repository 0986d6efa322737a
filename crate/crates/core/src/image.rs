//! Planar RGB images with real-valued pixels in `[0, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, Rgb, RgbImage};

use crate::error::{Error, Result};

/// A channel-major (`C×H×W`) image with `f32` pixels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::arg(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::arg(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// An RGB image with every pixel set to `value`.
    pub fn filled(height: usize, width: usize, value: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in value {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self {
            channels: 3,
            height,
            width,
            data,
        }
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

    /// `(height, width)`
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Decode a file, convert to RGB, resize to `resize×resize` and center-crop to `crop×crop`.
    pub fn load(path: &Path, resize: usize, crop: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img, resize, crop)
    }

    pub fn from_dynamic(img: &DynamicImage, resize: usize, crop: usize) -> Result<Self> {
        if crop == 0 || crop > resize {
            return Err(Error::arg(format!(
                "crop size {crop} must be in 1..={resize}"
            )));
        }
        let rgb = img
            .resize_exact(resize as u32, resize as u32, FilterType::Triangle)
            .to_rgb8();
        let offset = ((resize - crop) / 2) as u32;
        Ok(Self::from_rgb8_region(&rgb, offset, offset, crop, crop))
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Self {
        Self::from_rgb8_region(rgb, 0, 0, rgb.height() as usize, rgb.width() as usize)
    }

    fn from_rgb8_region(rgb: &RgbImage, top: u32, left: u32, height: usize, width: usize) -> Self {
        let plane = height * width;
        let mut data = vec![0.0f32; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = rgb.get_pixel(left + x as u32, top + y as u32);
                for c in 0..3 {
                    data[c * plane + y * width + x] = f32::from(px[c]) / 255.0;
                }
            }
        }
        Self {
            channels: 3,
            height,
            width,
            data,
        }
    }

    /// Quantize to 8-bit RGB. Single-channel images are replicated across channels.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut px = [0u8; 3];
                for (c, slot) in px.iter_mut().enumerate() {
                    let v = self.get(c.min(self.channels - 1), y, x);
                    *slot = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                out.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Resample to a new spatial size (triangle filter on the 8-bit representation).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.size() {
            return self.clone();
        }
        let rgb = image::imageops::resize(
            &self.to_rgb8(),
            width as u32,
            height as u32,
            FilterType::Triangle,
        );
        Self::from_rgb8(&rgb)
    }

    /// Rotate by `quarter_turns × 90°` clockwise. Non-square images only accept even turns.
    pub fn rotated(&self, quarter_turns: u8) -> Self {
        let turns = quarter_turns % 4;
        if turns % 2 == 1 && self.height != self.width {
            return self.rotated(2 * turns.div_ceil(2));
        }
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = match turns {
                        0 => (y, x),
                        1 => (h - 1 - x, y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (x, w - 1 - y),
                    };
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_four_times_is_identity() {
        let data: Vec<f32> = (0..3 * 4 * 4).map(|i| i as f32 / 48.0).collect();
        let img = Image::new(3, 4, 4, data).unwrap();
        let r = img.rotated(1).rotated(1).rotated(1).rotated(1);
        assert_eq!(r, img);
        assert_ne!(img.rotated(1), img);
    }

    #[test]
    fn rgb8_round_trip_is_exact_on_grid_values() {
        let data: Vec<f32> = (0..3 * 2 * 3).map(|i| (i * 10) as f32 / 255.0).collect();
        let img = Image::new(3, 2, 3, data).unwrap();
        assert_eq!(Image::from_rgb8(&img.to_rgb8()), img);
    }

    #[test]
    fn rejects_bad_buffer() {
        assert!(Image::new(3, 2, 2, vec![0.0; 5]).is_err());
        assert!(Image::new(3, 0, 2, vec![]).is_err());
    }

    #[test]
    fn center_crop_takes_the_middle() {
        let mut rgb = RgbImage::new(4, 4);
        rgb.put_pixel(1, 1, Rgb([255, 0, 0]));
        let img = Image::from_dynamic(&DynamicImage::ImageRgb8(rgb), 4, 2).unwrap();
        assert_eq!(img.size(), (2, 2));
        assert_eq!(img.get(0, 0, 0), 1.0);
    }
}
