//! Floating-point raster images and PNG persistence.
//!
//! Pixels are stored interleaved (row-major, channel-last) as `f32` on the
//! 0..=255 intensity scale. Masks are single-channel images holding 0 or 255.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: width * height * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Planar (channel-first) copy with every value mapped through `f`.
    pub fn to_planar(&self, f: impl Fn(usize, f32) -> f32) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = f(c, v);
            }
        }
        out
    }

    /// Luminance-weighted single-channel view (identity for gray images).
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Stacks the channels of `self` and `other` (same size) into one image.
    pub fn concat_channels(&self, other: &Image) -> Result<Image> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                found: other.width * other.height,
            });
        }
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.width * self.height * channels);
        for (a, b) in self
            .data
            .chunks_exact(self.channels)
            .zip(other.data.chunks_exact(other.channels))
        {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(Image {
            width: self.width,
            height: self.height,
            channels,
            data,
        })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        sum / self.data.len().max(1) as f64
    }

    /// Quantizes to 8 bits, the precision images are persisted at.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.round().clamp(0.0, 255.0);
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (width, height) = (dynimg.width() as usize, dynimg.height() as usize);
        match dynimg {
            image::DynamicImage::ImageLuma8(buf) => Image::from_vec(
                width,
                height,
                1,
                buf.into_raw().into_iter().map(f32::from).collect(),
            ),
            other => Image::from_vec(
                width,
                height,
                3,
                other.to_rgb8().into_raw().into_iter().map(f32::from).collect(),
            ),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path),
            3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path),
            c => {
                return Err(Error::Invalid(format!(
                    "cannot persist a {c}-channel image as PNG"
                )))
            }
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Number of nonzero pixels in a single-channel mask.
pub fn mask_area(mask: &Image) -> usize {
    mask.data().iter().filter(|&&v| v > 127.5).count()
}

pub fn mask_is_binary(mask: &Image) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 255.0)
}
