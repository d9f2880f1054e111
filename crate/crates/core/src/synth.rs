//! Synthetic scenes: ground-truth normal maps and masks of analytic shapes
//! rendered from a turntable of cameras, so the whole pipeline is
//! verifiable without external data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::AnalyticSdf;
use crate::geometry::{pixel_ray, AxisConvention, Camera};
use crate::mesh::{marching_cubes, TriMesh};
use crate::scene::{ImageF32, NormalView};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub shape: AnalyticSdf,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    /// Camera distance from the origin.
    pub orbit_radius: f64,
    /// Elevation of the main camera ring, degrees.
    pub elevation_deg: f64,
    /// Optional second ring for top coverage.
    pub second_ring_elevation_deg: Option<f64>,
    /// Angular noise applied to normals, degrees (sigma of a half-normal).
    pub noise_deg: f64,
    pub seed: u64,
    pub bound_radius: f64,
}

impl SynthSpec {
    pub fn new(shape: AnalyticSdf, n_views: usize, width: u32, height: u32) -> Self {
        SynthSpec {
            shape,
            n_views,
            width,
            height,
            orbit_radius: 2.6,
            elevation_deg: 20.0,
            second_ring_elevation_deg: None,
            noise_deg: 0.0,
            seed: 0,
            bound_radius: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::invalid("a scene needs at least 2 views"));
        }
        if self.noise_deg < 0.0 {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        let enclosing = self.shape.enclosing_radius();
        if enclosing > self.bound_radius - 0.1 {
            return Err(Error::invalid(format!(
                "shape (radius {enclosing:.3}) must fit the unit bound with 0.1 margin"
            )));
        }
        Ok(())
    }

    /// Focal length that fills roughly 70% of the frame with the shape.
    pub fn focal(&self) -> f64 {
        let extent = self.shape.enclosing_radius().max(0.2);
        0.35 * self.width.min(self.height) as f64 * self.orbit_radius / extent
    }
}

pub fn look_at_camera(eye: Vec3, width: u32, height: u32, focal: f64) -> Result<Camera> {
    let fwd = (-eye).normalize();
    let up = Vec3::z();
    let xc = fwd.cross(&up);
    if xc.norm() < 1e-9 {
        return Err(Error::invalid("camera on the turntable axis has no defined roll"));
    }
    let xc = xc.normalize();
    let yc = fwd.cross(&xc);
    Camera::new(
        focal,
        focal,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
        Mat3::from_columns(&[xc, yc, fwd]),
        eye,
        AxisConvention::YDown,
    )
}

const TRACE_TOL: f64 = 1e-5;
const TRACE_MAX_STEPS: usize = 512;

fn sphere_trace(shape: &AnalyticSdf, origin: &Vec3, dir: &Vec3, t_end: f64) -> Option<Vec3> {
    let mut t = 1e-4;
    for _ in 0..TRACE_MAX_STEPS {
        let p = origin + t * dir;
        let f = shape.value(&p);
        if f.abs() < TRACE_TOL {
            return Some(p);
        }
        // Conservative step: the smooth-union variant is not an exact SDF.
        t += f * 0.9;
        if t > t_end || t < 0.0 {
            return None;
        }
    }
    None
}

/// Render the ground-truth views of `spec.shape` plus a reference mesh
/// (marching cubes at 256) for evaluation.
pub fn synth_views(spec: &SynthSpec) -> Result<(Vec<NormalView>, TriMesh)> {
    spec.validate()?;
    let mut eyes = Vec::with_capacity(spec.n_views);
    let rings: Vec<(usize, f64)> = match spec.second_ring_elevation_deg {
        None => vec![(spec.n_views, spec.elevation_deg)],
        Some(e2) => {
            let n1 = spec.n_views - spec.n_views / 3;
            vec![(n1, spec.elevation_deg), (spec.n_views - n1, e2)]
        }
    };
    for (n, elev) in rings {
        let el = elev.to_radians();
        for i in 0..n {
            let az = i as f64 / n as f64 * std::f64::consts::TAU;
            eyes.push(Vec3::new(
                spec.orbit_radius * el.cos() * az.cos(),
                spec.orbit_radius * el.cos() * az.sin(),
                spec.orbit_radius * el.sin(),
            ));
        }
    }

    let focal = spec.focal();
    let t_end = spec.orbit_radius + spec.bound_radius;
    let views: Result<Vec<NormalView>> = eyes
        .iter()
        .enumerate()
        .map(|(vi, eye)| {
            let camera = look_at_camera(*eye, spec.width, spec.height, focal)?;
            let mut normals = ImageF32::new(spec.width, spec.height, 3);
            let mut mask = ImageF32::new(spec.width, spec.height, 1);
            let rows: Vec<Vec<([f32; 3], f32)>> = (0..spec.height)
                .into_par_iter()
                .map(|y| {
                    let mut row = Vec::with_capacity(spec.width as usize);
                    for x in 0..spec.width {
                        let ray = pixel_ray(&camera, (x, y), (0.5, 0.5)).expect("in bounds");
                        match sphere_trace(&spec.shape, &ray.origin, &ray.direction, t_end) {
                            Some(hit) => {
                                let n = spec.shape.gradient(&hit).normalize();
                                row.push(([n.x as f32, n.y as f32, n.z as f32], 1.0));
                            }
                            None => row.push(([0.0; 3], 0.0)),
                        }
                    }
                    row
                })
                .collect();
            for (y, row) in rows.into_iter().enumerate() {
                for (x, (n, m)) in row.into_iter().enumerate() {
                    normals.set3(x as u32, y as u32, n);
                    mask.set(x as u32, y as u32, 0, m);
                }
            }
            let mut view = NormalView {
                camera,
                normals,
                mask,
            };
            if spec.noise_deg > 0.0 {
                add_noise_view(&mut view, spec.noise_deg, spec.seed, vi as u64);
            }
            Ok(view)
        })
        .collect();
    let views = views?;
    let gt_mesh = marching_cubes(&spec.shape, 256, 0.0, spec.bound_radius)?;
    Ok((views, gt_mesh))
}

/// Rotate each foreground normal by |N(0, sigma)| degrees about a random
/// perpendicular axis.
pub fn add_noise(views: &mut [NormalView], sigma_deg: f64, seed: u64) {
    for (vi, view) in views.iter_mut().enumerate() {
        add_noise_view(view, sigma_deg, seed, vi as u64);
    }
}

fn add_noise_view(view: &mut NormalView, sigma_deg: f64, seed: u64, view_index: u64) {
    if sigma_deg <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ view_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for y in 0..view.camera.height {
        for x in 0..view.camera.width {
            if view.mask.get(x, y, 0) <= 0.5 {
                continue;
            }
            let n = view.normal_at(x, y);
            // Half-normal angle.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let angle = ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()).abs()
                * sigma_deg.to_radians();
            // Random perpendicular axis.
            let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let e1 = n.cross(&helper).normalize();
            let e2 = n.cross(&e1);
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            let axis = e1 * phi.cos() + e2 * phi.sin();
            // Rodrigues rotation of n about a perpendicular axis.
            let rotated = (n * angle.cos() + axis.cross(&n) * angle.sin()).normalize();
            view.normals
                .set3(x, y, [rotated.x as f32, rotated.y as f32, rotated.z as f32]);
        }
    }
}
