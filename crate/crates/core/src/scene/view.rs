//! One posed observation: a world-space normal map, its foreground mask and
//! the camera that produced it.

use crate::geometry::{Camera, ViewBases};
use crate::scene::image::ImageF32;
use crate::Vec3;

pub const FOREGROUND_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone)]
pub struct NormalView {
    pub camera: Camera,
    /// World-space unit normals, 3 channels; zero outside the mask.
    pub normals: ImageF32,
    /// Foreground mask, 1 channel in [0,1].
    pub mask: ImageF32,
}

impl NormalView {
    #[inline]
    pub fn is_foreground(&self, x: u32, y: u32) -> bool {
        self.mask.get(x, y, 0) > FOREGROUND_THRESHOLD
    }

    pub fn normal_at(&self, x: u32, y: u32) -> Vec3 {
        let n = self.normals.get3(x, y);
        Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64)
    }

    /// Pixels eligible as patch centers: any pixel whose whole patch
    /// footprint lies inside the image. Background centers matter — their
    /// rays are what carve space through the mask term.
    pub fn center_candidates(&self, patch_radius: u32) -> Vec<(u32, u32)> {
        let (w, h) = (self.camera.width, self.camera.height);
        if w <= 2 * patch_radius || h <= 2 * patch_radius {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(((w - 2 * patch_radius) * (h - 2 * patch_radius)) as usize);
        for y in patch_radius..h - patch_radius {
            for x in patch_radius..w - patch_radius {
                out.push((x, y));
            }
        }
        out
    }

    /// Pixels that can appear anywhere in a sampled patch.
    pub fn active_pixels(&self, _patch_radius: u32) -> Vec<bool> {
        vec![true; (self.camera.width * self.camera.height) as usize]
    }

    pub fn build_bases(&self, patch_radius: u32) -> crate::Result<ViewBases> {
        ViewBases::build(&self.camera, &self.active_pixels(patch_radius))
    }

    pub fn foreground_count(&self) -> usize {
        self.mask
            .data
            .iter()
            .filter(|&&m| m > FOREGROUND_THRESHOLD)
            .count()
    }
}
