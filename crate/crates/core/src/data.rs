//! Conversions from samples to normalized network tensors.

use grlb_tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::colorize_depth;
use crate::imaging::{DepthMap, Image, Mask};
use crate::scenegen::PairedSample;

/// Global affine map of depth values onto [−1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthNorm {
    pub min: f32,
    pub max: f32,
}

impl Default for DepthNorm {
    fn default() -> Self {
        Self { min: 0.0, max: 1.0 }
    }
}

impl DepthNorm {
    /// Range of both depth panels over `samples`.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a PairedSample>) -> Self {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for s in samples {
            for &v in s.x0_minus.data().iter().chain(s.x0_plus.data()) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() || hi - lo < 1e-6 {
            return Self::default();
        }
        Self { min: lo, max: hi }
    }

    pub fn normalize(&self, v: f32) -> f32 {
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    pub fn denormalize(&self, v: f32) -> f32 {
        (v + 1.0) * 0.5 * (self.max - self.min) + self.min
    }

    /// Depth-unit size of one normalized unit.
    pub fn scale(&self) -> f32 {
        0.5 * (self.max - self.min)
    }
}

pub fn rgb_normalize(v: f32) -> f32 {
    2.0 * v - 1.0
}

pub fn rgb_denormalize(v: f32) -> f32 {
    (v + 1.0) * 0.5
}

/// Builds an [N, C, H, W] tensor from per-example planar channel blocks.
pub fn stack_planar<T: Elem>(items: &[Vec<f32>], channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(items.len() * channels * h * w);
    for it in items {
        if it.len() != channels * h * w {
            return Err(CoreError::Shape(format!("expected {channels}x{h}x{w} values, got {}", it.len())));
        }
        data.extend(it.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::new(vec![items.len(), channels, h, w], data)?)
}

/// Normalized depth, one plane.
pub fn depth_plane(d: &DepthMap, norm: &DepthNorm) -> Vec<f32> {
    d.data().iter().map(|&v| norm.normalize(v)).collect()
}

/// Normalized RGB, three planes.
pub fn rgb_planes(img: &Image) -> Vec<f32> {
    img.to_planar().into_iter().map(rgb_normalize).collect()
}

/// Colorized depth normalized per channel like a depth plane.
pub fn colorized_planes(d: &DepthMap, norm: &DepthNorm) -> Vec<f32> {
    colorize_depth(d).to_planar().into_iter().map(|v| norm.normalize(v)).collect()
}

/// `values` zeroed where `mask` is set, per plane.
pub fn masked_out(values: &[f32], mask: &Mask) -> Vec<f32> {
    let hw = mask.data().len();
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| if mask.data()[k % hw] { 0.0 } else { v })
        .collect()
}

pub fn mask_plane(mask: &Mask) -> Vec<f32> {
    mask.to_f32()
}

/// Depth map from a normalized plane (values are not clamped).
pub fn depth_from_plane(plane: &[f32], h: usize, w: usize, norm: &DepthNorm) -> Result<DepthMap> {
    DepthMap::new(h, w, plane.iter().map(|&v| norm.denormalize(v)).collect())
}

/// Image from normalized planar RGB, clamped to [0, 1].
pub fn image_from_planes(planes: &[f32], h: usize, w: usize) -> Result<Image> {
    let rgb: Vec<f32> = planes.iter().map(|&v| rgb_denormalize(v).clamp(0.0, 1.0)).collect();
    Image::from_planar(h, w, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_norm_round_trip() {
        let n = DepthNorm { min: 0.4, max: 1.0 };
        assert_eq!(n.normalize(0.4), -1.0);
        assert_eq!(n.normalize(1.0), 1.0);
        for v in [0.4f32, 0.55, 0.7, 0.93, 1.0] {
            assert!((n.denormalize(n.normalize(v)) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_out_zeroes_every_plane() {
        let mut m = Mask::empty(1, 2);
        m.set(0, 1, true);
        assert_eq!(masked_out(&[1.0, 2.0, 3.0, 4.0], &m), vec![1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn stack_checks_sizes() {
        let t: Tensor<f32> = stack_planar(&[vec![0.0; 8], vec![1.0; 8]], 2, 2, 2).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 2]);
        assert!(stack_planar::<f32>(&[vec![0.0; 7]], 2, 2, 2).is_err());
    }
}
