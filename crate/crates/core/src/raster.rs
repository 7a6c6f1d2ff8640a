//! Row-major, channel-interleaved 8-bit images.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geom::{BBox, ImageDims};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RasterError {
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(u8),
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("crop region empty after rounding to pixels")]
    EmptyCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub fn channels(self) -> u8 {
        match self {
            Modality::Rgb => 3,
            Modality::Thermal => 1,
        }
    }

    pub fn from_channels(channels: u8) -> Result<Self, RasterError> {
        match channels {
            3 => Ok(Modality::Rgb),
            1 => Ok(Modality::Thermal),
            c => Err(RasterError::Channels(c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    dims: ImageDims,
    channels: u8,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(dims: ImageDims, channels: u8, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::Channels(channels));
        }
        let expected = dims.pixel_count() * channels as usize;
        if pixels.len() != expected {
            return Err(RasterError::BufferSize { expected, got: pixels.len() });
        }
        Ok(Self { dims, channels, pixels })
    }

    pub fn filled(dims: ImageDims, channels: u8, value: &[u8]) -> Result<Self, RasterError> {
        if value.len() != channels as usize {
            return Err(RasterError::BufferSize { expected: channels as usize, got: value.len() });
        }
        let mut pixels = vec![0u8; dims.pixel_count() * channels as usize];
        for px in pixels.chunks_exact_mut(channels as usize) {
            px.copy_from_slice(value);
        }
        Self::new(dims, channels, pixels)
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }
    pub fn width(&self) -> u32 {
        self.dims.width
    }
    pub fn height(&self) -> u32 {
        self.dims.height
    }
    pub fn channels(&self) -> u8 {
        self.channels
    }
    pub fn modality(&self) -> Modality {
        // Constructor guarantees 1 or 3.
        Modality::from_channels(self.channels).unwrap_or(Modality::Rgb)
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }
    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        (y as usize * self.dims.width as usize + x as usize) * self.channels as usize
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let i = self.index(x, y);
        &self.pixels[i..i + self.channels as usize]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let i = self.index(x, y);
        let c = self.channels as usize;
        &mut self.pixels[i..i + c]
    }

    /// Rec.601 luma (or the single channel for thermal).
    #[inline]
    pub fn luma(&self, x: u32, y: u32) -> f64 {
        let p = self.pixel(x, y);
        if self.channels == 1 {
            f64::from(p[0])
        } else {
            0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
        }
    }

    /// Pixel rectangle covered by a box: columns `[x0, x1)`, rows `[y0, y1)`,
    /// obtained by rounding the box edges and clamping to the image.
    pub fn pixel_span(&self, b: &BBox) -> Option<(u32, u32, u32, u32)> {
        let clampx = |v: f64| crate::math::round(v).clamp(0.0, f64::from(self.dims.width)) as u32;
        let clampy = |v: f64| crate::math::round(v).clamp(0.0, f64::from(self.dims.height)) as u32;
        let (x0, x1) = (clampx(b.x_min()), clampx(b.x_max()));
        let (y0, y1) = (clampy(b.y_min()), clampy(b.y_max()));
        (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
    }

    pub fn crop(&self, b: &BBox) -> Result<(RasterImage, (u32, u32)), RasterError> {
        let (x0, y0, x1, y1) = self.pixel_span(b).ok_or(RasterError::EmptyCrop)?;
        let c = self.channels as usize;
        let mut out = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize * c);
        for y in y0..y1 {
            let start = self.index(x0, y);
            let end = self.index(x1 - 1, y) + c;
            out.extend_from_slice(&self.pixels[start..end]);
        }
        let dims = ImageDims { width: x1 - x0, height: y1 - y0 };
        Ok((RasterImage::new(dims, self.channels, out)?, (x0, y0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_size_checked() {
        let dims = ImageDims::new(2, 2).unwrap();
        assert!(RasterImage::new(dims, 3, vec![0; 12]).is_ok());
        assert!(RasterImage::new(dims, 3, vec![0; 11]).is_err());
        assert!(RasterImage::new(dims, 2, vec![0; 8]).is_err());
    }

    #[test]
    fn crop_rounds_and_clamps() {
        let dims = ImageDims::new(4, 3).unwrap();
        let img = RasterImage::new(dims, 1, (0..12).collect()).unwrap();
        let (c, origin) = img.crop(&BBox::new(0.6, 0.4, 3.2, 5.0).unwrap()).unwrap();
        assert_eq!(origin, (1, 0));
        assert_eq!(c.dims(), ImageDims { width: 2, height: 3 });
        assert_eq!(c.pixels(), &[1, 2, 5, 6, 9, 10]);
    }
}
