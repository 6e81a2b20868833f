//! Single-channel 2-D float image, the carrier for x, x' and difference
//! maps.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::path::Path;

/// The affine 16-bit PNG intensity code covers [-2, 2] so that both noise
/// tails and ground-truth effect maps survive a round trip.
pub const PNG_VMIN: f32 = -2.0;
pub const PNG_VMAX: f32 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    pub data: Array2<f32>,
}

impl ImageRaster {
    pub fn new(data: Array2<f32>) -> Self {
        ImageRaster { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ImageRaster {
            data: Array2::zeros((h, w)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn min(&self) -> f32 {
        self.data.iter().cloned().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f32 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn std(&self) -> f32 {
        let m = self.mean();
        let n = self.data.len() as f32;
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / n).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Encode into the fixed [-2, 2] affine 16-bit code
    /// `v_png = round((v + 2) / 4 * 65535)`, clamped.
    pub fn to_png16(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|&v| {
                let t = ((v - PNG_VMIN) / (PNG_VMAX - PNG_VMIN) * 65535.0).round();
                t.clamp(0.0, 65535.0) as u16
            })
            .collect()
    }

    pub fn from_png16(raw: &[u16], h: usize, w: usize) -> Result<Self> {
        if raw.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", h, w),
                got: format!("{} samples", raw.len()),
            });
        }
        let data = Array2::from_shape_vec(
            (h, w),
            raw.iter()
                .map(|&p| p as f32 / 65535.0 * (PNG_VMAX - PNG_VMIN) + PNG_VMIN)
                .collect(),
        )
        .expect("shape checked");
        Ok(ImageRaster { data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_png16();
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            self.width() as u32,
            self.height() as u32,
            buf,
        )
        .expect("buffer size matches");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        Self::from_png16(img.as_raw(), h as usize, w as usize)
    }

    /// Load an 8/16-bit grayscale PNG as raw intensities in [0, 1], with no
    /// affine recode. Used for external cohort images.
    pub fn load_png_raw01(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_vec(
            (h as usize, w as usize),
            img.as_raw().iter().map(|&p| p as f32 / 65535.0).collect(),
        )
        .expect("dimensions from decoder");
        Ok(ImageRaster { data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn png_roundtrip_is_close() {
        let img = ImageRaster::new(Array2::from_shape_fn((8, 9), |(i, j)| {
            -1.9 + 0.05 * (i * 9 + j) as f32
        }));
        let back = ImageRaster::from_png16(&img.to_png16(), 8, 9).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 4.0 / 65535.0);
        }
    }

    #[test]
    fn png_code_matches_formula() {
        let img = ImageRaster::new(Array2::from_elem((1, 1), 0.0));
        // (0 + 2) / 4 * 65535 = 32767.5 -> rounds to 32768
        assert_eq!(img.to_png16()[0], 32768);
    }
}
