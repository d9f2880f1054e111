//! Closed-form implicit shapes used as ground truth and as oracles.

use serde::{Deserialize, Serialize};

use crate::Vec3;

/// Analytic signed fields. Sphere and torus are exact signed distances; the
/// smooth union of two spheres is a valid implicit function (negative inside,
/// zero on the surface) but not an exact distance away from it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum AnalyticSdf {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-z torus: ring of `major_radius`, tube of `minor_radius`.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    SmoothUnionSpheres {
        center_a: [f64; 3],
        radius_a: f64,
        center_b: [f64; 3],
        radius_b: f64,
        blend: f64,
    },
}

impl AnalyticSdf {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        AnalyticSdf::Sphere {
            center: [center.x, center.y, center.z],
            radius,
        }
    }

    pub fn torus(center: Vec3, major_radius: f64, minor_radius: f64) -> Self {
        AnalyticSdf::Torus {
            center: [center.x, center.y, center.z],
            major_radius,
            minor_radius,
        }
    }

    pub fn value(&self, p: &Vec3) -> f64 {
        match self {
            AnalyticSdf::Sphere { center, radius } => (p - Vec3::from(*center)).norm() - radius,
            AnalyticSdf::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let q = p - Vec3::from(*center);
                let ring = (q.x * q.x + q.y * q.y).sqrt() - major_radius;
                (ring * ring + q.z * q.z).sqrt() - minor_radius
            }
            AnalyticSdf::SmoothUnionSpheres {
                center_a,
                radius_a,
                center_b,
                radius_b,
                blend,
            } => {
                let da = (p - Vec3::from(*center_a)).norm() - radius_a;
                let db = (p - Vec3::from(*center_b)).norm() - radius_b;
                smooth_min(da, db, *blend)
            }
        }
    }

    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        match self {
            AnalyticSdf::Sphere { center, .. } => {
                let d = p - Vec3::from(*center);
                let n = d.norm();
                if n == 0.0 {
                    Vec3::zeros()
                } else {
                    d / n
                }
            }
            AnalyticSdf::Torus {
                center,
                major_radius,
                ..
            } => {
                let q = p - Vec3::from(*center);
                let rho = (q.x * q.x + q.y * q.y).sqrt();
                if rho == 0.0 {
                    // On the axis the nearest tube point is any direction; pick z.
                    return Vec3::new(0.0, 0.0, q.z.signum());
                }
                let ring = rho - major_radius;
                let len = (ring * ring + q.z * q.z).sqrt();
                if len == 0.0 {
                    return Vec3::zeros();
                }
                Vec3::new(ring * q.x / rho, ring * q.y / rho, q.z) / len
            }
            AnalyticSdf::SmoothUnionSpheres {
                center_a,
                radius_a,
                center_b,
                radius_b,
                blend,
            } => {
                let va = p - Vec3::from(*center_a);
                let vb = p - Vec3::from(*center_b);
                let (na, nb) = (va.norm(), vb.norm());
                let da = na - radius_a;
                let db = nb - radius_b;
                let ga = if na == 0.0 { Vec3::zeros() } else { va / na };
                let gb = if nb == 0.0 { Vec3::zeros() } else { vb / nb };
                let (wa, wb) = smooth_min_weights(da, db, *blend);
                ga * wa + gb * wb
            }
        }
    }

    /// Radius of a sphere that encloses the shape.
    pub fn enclosing_radius(&self) -> f64 {
        match self {
            AnalyticSdf::Sphere { center, radius } => Vec3::from(*center).norm() + radius,
            AnalyticSdf::Torus {
                center,
                major_radius,
                minor_radius,
            } => Vec3::from(*center).norm() + major_radius + minor_radius,
            AnalyticSdf::SmoothUnionSpheres {
                center_a,
                radius_a,
                center_b,
                radius_b,
                ..
            } => {
                let ra = Vec3::from(*center_a).norm() + radius_a;
                let rb = Vec3::from(*center_b).norm() + radius_b;
                ra.max(rb)
            }
        }
    }
}

/// Polynomial smooth minimum with blend width k.
fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    b * (1.0 - h) + a * h - k * h * (1.0 - h)
}

fn smooth_min_weights(a: f64, b: f64, k: f64) -> (f64, f64) {
    if k <= 0.0 {
        return if a <= b { (1.0, 0.0) } else { (0.0, 1.0) };
    }
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    // d smin / da and / db, using dh/da = -1/(2k) inside the clamp.
    if h == 0.0 || h == 1.0 {
        return if a <= b { (1.0, 0.0) } else { (0.0, 1.0) };
    }
    let dh_da = -0.5 / k;
    let dh_db = 0.5 / k;
    let dsmin_dh = a - b - k * (1.0 - 2.0 * h);
    (h + dsmin_dh * dh_da, (1.0 - h) + dsmin_dh * dh_db)
}
