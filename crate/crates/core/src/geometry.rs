//! Cameras, rays, and the per-pixel direction basis used by directional
//! finite differences.
//!
//! A camera is a plain pinhole: no distortion, no rolling shutter. The image
//! convention is explicit because input data never states it: `YDown` is the
//! OpenCV frame (+x right, +y down, +z forward), `YUp` the OpenGL one
//! (+y up, -z forward). All basis math is phrased in terms of the world
//! directions of *increasing image x / increasing image y* plus the viewing
//! ray, so both conventions feed the same downstream algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisConvention {
    /// +x right, +y down, +z forward (OpenCV).
    YDown,
    /// +x right, +y up, -z forward (OpenGL).
    YUp,
}

impl AxisConvention {
    /// Camera-space unit vectors (image-x step, image-y step, optical axis).
    fn frame(self) -> (Vec3, Vec3, Vec3) {
        match self {
            AxisConvention::YDown => (Vec3::x(), Vec3::y(), Vec3::z()),
            AxisConvention::YUp => (Vec3::x(), -Vec3::y(), -Vec3::z()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation_world_from_cam: Mat3,
    pub translation_world_from_cam: Vec3,
    pub convention: AxisConvention,
}

const ORTHO_TOL: f64 = 1e-6;

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation_world_from_cam: Mat3,
        translation_world_from_cam: Vec3,
        convention: AxisConvention,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        let r = rotation_world_from_cam;
        let gram = r.transpose() * r;
        let dev = (gram - Mat3::identity()).abs().max();
        if dev > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (|R^T R - I| max = {dev:.3e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "rotation determinant {} is not +1",
                r.determinant()
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation_world_from_cam,
            translation_world_from_cam,
            convention,
        })
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation_world_from_cam
    }

    /// World directions of (image-x step, image-y step, optical axis).
    pub fn world_frame(&self) -> (Vec3, Vec3, Vec3) {
        let (ix, iy, fwd) = self.convention.frame();
        let r = &self.rotation_world_from_cam;
        (r * ix, r * iy, r * fwd)
    }

    /// Optical axis in world space; also the marching-plane normal m.
    pub fn optical_axis(&self) -> Vec3 {
        self.world_frame().2
    }

    /// Project a world point to continuous pixel coordinates and depth along
    /// the optical axis. Points behind the camera yield None.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let (ix, iy, fwd) = self.convention.frame();
        let cam = self.rotation_world_from_cam.transpose() * (p - self.translation_world_from_cam);
        let depth = cam.dot(&fwd);
        if depth <= 0.0 {
            return None;
        }
        let u = self.fx * cam.dot(&ix) / depth + self.cx;
        let v = self.fy * cam.dot(&iy) / depth + self.cy;
        Some((u, v, depth))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        debug_assert!((direction.norm() - 1.0).abs() < 1e-9);
        Ray { origin, direction }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }
}

/// Back-project pixel `px` with sub-pixel offset `sub` in [0,1)^2 into a
/// world-space ray from the camera center.
pub fn pixel_ray(cam: &Camera, px: (u32, u32), sub: (f64, f64)) -> Result<Ray> {
    if px.0 >= cam.width || px.1 >= cam.height {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) outside {}x{} image",
            px.0, px.1, cam.width, cam.height
        )));
    }
    let u = px.0 as f64 + sub.0;
    let v = px.1 as f64 + sub.1;
    let (ix, iy, fwd) = cam.convention.frame();
    let dir_cam = ix * ((u - cam.cx) / cam.fx) + iy * ((v - cam.cy) / cam.fy) + fwd;
    let dir_world = (cam.rotation_world_from_cam * dir_cam).normalize();
    Ok(Ray::new(cam.center(), dir_world))
}

/// Rotate camera-space normals into world space. Non-unit inputs (beyond
/// 1e-3) are renormalized; the count of renormalized entries is returned so
/// callers can report data quality.
pub fn camera_to_world_normals(cam: &Camera, normals: &[[f32; 3]]) -> (Vec<[f32; 3]>, usize) {
    let r = &cam.rotation_world_from_cam;
    let mut renormalized = 0usize;
    let out = normals
        .iter()
        .map(|n| {
            let mut v = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            let len = v.norm();
            if len == 0.0 {
                return [0.0f32; 3];
            }
            if (len - 1.0).abs() > 1e-3 {
                renormalized += 1;
                v /= len;
            }
            let w = r * v;
            [w.x as f32, w.y as f32, w.z as f32]
        })
        .collect();
    (out, renormalized)
}

/// The per-pixel sampling directions for directional finite differences:
/// rows of `v` are (image-x world dir, image-y world dir, viewing ray dir).
#[derive(Debug, Clone)]
pub struct DirectionBasis {
    pub v: Mat3,
    pub v_inv: Mat3,
    pub marching_plane_normal: Vec3,
}

/// Build the direction basis for one pixel ray of `cam`.
///
/// The viewing ray always has a positive component along the optical axis
/// for pixels inside the image, so `v` cannot be singular; a determinant
/// collapse indicates a bug upstream and is reported as internal.
pub fn direction_basis(cam: &Camera, ray: &Ray) -> Result<DirectionBasis> {
    let (ex, ey, axis) = cam.world_frame();
    let v = Mat3::from_rows(&[ex.transpose(), ey.transpose(), ray.direction.transpose()]);
    let det = v.determinant();
    if det.abs() <= 1e-8 {
        return Err(Error::internal(format!(
            "direction basis is singular (det = {det:.3e}); ray {:?}",
            ray.direction
        )));
    }
    let v_inv = v
        .try_inverse()
        .ok_or_else(|| Error::internal("direction basis inversion failed".to_string()))?;
    Ok(DirectionBasis {
        v,
        v_inv,
        marching_plane_normal: axis,
    })
}

/// Precomputed direction bases for the pixels of one view (foreground mask
/// dilated by the patch radius). Built once before training.
pub struct ViewBases {
    width: u32,
    slots: Vec<u32>,
    bases: Vec<DirectionBasis>,
    pub marching_plane_normal: Vec3,
}

const NO_SLOT: u32 = u32::MAX;

impl ViewBases {
    /// `active` marks pixels that may appear in a patch; bases are built for
    /// exactly those.
    pub fn build(cam: &Camera, active: &[bool]) -> Result<Self> {
        let n = (cam.width * cam.height) as usize;
        assert_eq!(active.len(), n);
        let mut slots = vec![NO_SLOT; n];
        let mut bases = Vec::new();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let idx = (y * cam.width + x) as usize;
                if !active[idx] {
                    continue;
                }
                let ray = pixel_ray(cam, (x, y), (0.5, 0.5))?;
                let basis = direction_basis(cam, &ray)?;
                slots[idx] = bases.len() as u32;
                bases.push(basis);
            }
        }
        Ok(ViewBases {
            width: cam.width,
            slots,
            bases,
            marching_plane_normal: cam.optical_axis(),
        })
    }

    pub fn get(&self, x: u32, y: u32) -> Option<&DirectionBasis> {
        let slot = *self.slots.get((y * self.width + x) as usize)?;
        if slot == NO_SLOT {
            None
        } else {
            Some(&self.bases[slot as usize])
        }
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }
}
