//! In-memory frames and the conditioning pyramid derived from the identity
//! image. Model-side frames are [3, h, w] tensors in [-1, 1]; metric-side
//! images use the 8-bit 0..255 convention (as f64).

use crate::tensor::{avg_pool2, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("identity image must be square, got {h}x{w}")]
    NotSquare { h: usize, w: usize },
    #[error("identity resolution {0} must be a power of two in [64, 256]")]
    BadResolution(usize),
    #[error("pixel values must be finite and within [-1, 1]")]
    BadPixels,
    #[error("expected a [3, h, w] tensor, got {0:?}")]
    BadShape(Vec<usize>),
}

/// The single aligned input face plus its multi-resolution conditioning
/// pyramid (coarse 4x4 up to the full resolution).
#[derive(Debug, Clone)]
pub struct IdentityImage {
    pixels: Tensor, // [3, h, w] in [-1, 1]
    pyramid: Vec<Tensor>,
}

impl IdentityImage {
    pub fn from_pixels(pixels: Tensor) -> Result<IdentityImage, ImageError> {
        let shape = pixels.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(ImageError::BadShape(shape));
        }
        let (h, w) = (shape[1], shape[2]);
        if h != w {
            return Err(ImageError::NotSquare { h, w });
        }
        if !h.is_power_of_two() || !(64..=256).contains(&h) {
            return Err(ImageError::BadResolution(h));
        }
        if !pixels.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0 + 1e-12) {
            return Err(ImageError::BadPixels);
        }
        // Coarse-to-fine averaged copies at every block resolution.
        let mut levels = vec![pixels.reshaped(&[1, 3, h, w])];
        let mut side = h;
        while side > 4 {
            let next = avg_pool2(levels.last().unwrap());
            levels.push(next);
            side /= 2;
        }
        levels.reverse();
        Ok(IdentityImage { pixels, pyramid: levels })
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// [3, h, w] in [-1, 1].
    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    /// Pyramid levels coarse to fine; each is [1, 3, side, side].
    pub fn pyramid(&self) -> &[Tensor] {
        &self.pyramid
    }

    /// The level with the given side length.
    pub fn level(&self, side: usize) -> Option<&Tensor> {
        self.pyramid.iter().find(|t| t.shape()[2] == side)
    }
}

/// Convert a [-1,1] chw tensor to the 0..255 convention (no quantisation).
pub fn chw_to_255(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 127.5)
}

/// Convert 0..255 values back to [-1,1].
pub fn scale_255_to_unit(t: &Tensor) -> Tensor {
    t.map(|v| v / 127.5 - 1.0)
}

/// BT.601 luma of a [3, h, w] tensor (any range), yielding [h, w].
pub fn luma(rgb: &Tensor) -> Tensor {
    let s = rgb.shape();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], 3);
    let (h, w) = (s[1], s[2]);
    let d = rgb.data();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h * w {
        out.push(0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i]);
    }
    Tensor::from_vec(&[h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(side: usize) -> Tensor {
        let mut data = Vec::with_capacity(3 * side * side);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    data.push(((x + y + c) as f64 / (2 * side) as f64) * 2.0 - 1.0);
                }
            }
        }
        Tensor::from_vec(&[3, side, side], data)
    }

    #[test]
    fn pyramid_levels_coarse_to_fine() {
        let id = IdentityImage::from_pixels(gradient_image(64)).unwrap();
        let sides: Vec<usize> = id.pyramid().iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sides, vec![4, 8, 16, 32, 64]);
        assert!(id.level(16).is_some());
        assert!(id.level(5).is_none());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            IdentityImage::from_pixels(Tensor::zeros(&[3, 64, 32])),
            Err(ImageError::NotSquare { .. })
        ));
        assert!(matches!(
            IdentityImage::from_pixels(Tensor::zeros(&[3, 48, 48])),
            Err(ImageError::BadResolution(48))
        ));
        assert!(matches!(
            IdentityImage::from_pixels(Tensor::filled(&[3, 64, 64], 2.0)),
            Err(ImageError::BadPixels)
        ));
        assert!(matches!(
            IdentityImage::from_pixels(Tensor::zeros(&[1, 64, 64])),
            Err(ImageError::BadShape(_))
        ));
    }

    #[test]
    fn range_conversions_invert() {
        let t = gradient_image(64);
        let back = scale_255_to_unit(&chw_to_255(&t));
        assert!(t.max_abs_diff(&back) < 1e-12);
    }
}
