//! Triangle meshes, isosurface extraction and the evaluation metrics:
//! visibility-based point sampling, Chamfer distance, F-score and normal
//! angular error.

mod bvh;
mod io;
mod mc;
mod nn;

pub use bvh::{Bvh, Hit};
pub use io::{read_obj, read_ply, write_obj};
pub use mc::marching_cubes;
pub use nn::NnGrid;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::pixel_ray;
use crate::scene::{ImageF32, NormalView};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                );
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::invalid("triangle index out of range"));
        }
        Ok(())
    }

    /// Drop zero-area triangles (area < 1e-12).
    pub fn cleanup(&mut self) {
        self.triangles.retain(|t| {
            let (a, b, c) = (
                self.vertices[t[0] as usize],
                self.vertices[t[1] as usize],
                self.vertices[t[2] as usize],
            );
            0.5 * (b - a).cross(&(c - a)).norm() >= 1e-12
        });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer_l2: f64,
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_angular_error_deg: Option<f64>,
    pub tau: f64,
    pub squared_chamfer: bool,
    pub recon_points: usize,
    pub gt_points: usize,
    pub recon_misses: usize,
    pub gt_misses: usize,
}

/// One visible surface point per foreground pixel that hits the mesh.
pub struct VisiblePoints {
    pub points: Vec<Vec3>,
    /// (view, x, y) per point, parallel to `points`.
    pub sources: Vec<(u32, u32, u32)>,
    pub misses: usize,
}

/// Cast a ray through every foreground pixel of every view and keep the
/// first mesh intersection.
pub fn visible_points(mesh: &TriMesh, views: &[NormalView]) -> Result<VisiblePoints> {
    if mesh.triangles.is_empty() {
        return Err(Error::invalid("visible_points needs a non-empty mesh"));
    }
    mesh.validate()?;
    let bvh = Bvh::build(mesh);
    let per_view: Vec<(Vec<Vec3>, Vec<(u32, u32, u32)>, usize)> = views
        .par_iter()
        .enumerate()
        .map(|(vi, view)| {
            let mut pts = Vec::new();
            let mut srcs = Vec::new();
            let mut misses = 0usize;
            for y in 0..view.camera.height {
                for x in 0..view.camera.width {
                    if !view.is_foreground(x, y) {
                        continue;
                    }
                    let ray = pixel_ray(&view.camera, (x, y), (0.5, 0.5))?;
                    match bvh.first_hit(&ray) {
                        Some(hit) => {
                            pts.push(hit.point);
                            srcs.push((vi as u32, x, y));
                        }
                        None => misses += 1,
                    }
                }
            }
            Ok((pts, srcs, misses))
        })
        .collect::<Result<_>>()?;
    let mut out = VisiblePoints {
        points: Vec::new(),
        sources: Vec::new(),
        misses: 0,
    };
    for (pts, srcs, misses) in per_view {
        out.points.extend(pts);
        out.sources.extend(srcs);
        out.misses += misses;
    }
    Ok(out)
}

/// Symmetric mean nearest-neighbor distance:
/// d = 1/(2|A|) sum d(a,B) + 1/(2|B|) sum d(b,A).
///
/// Despite the customary "L2 Chamfer" name this averages plain Euclidean
/// distances; `squared` switches to squared distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3], squared: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs non-empty point sets"));
    }
    let ga = NnGrid::build(a);
    let gb = NnGrid::build(b);
    let xf = |d: f64| if squared { d * d } else { d };
    // Collect per-point distances in index order, then reduce sequentially:
    // the result is bit-stable across thread counts.
    let d_ab: Vec<f64> = a.par_iter().map(|p| xf(gb.nearest(p).1)).collect();
    let d_ba: Vec<f64> = b.par_iter().map(|p| xf(ga.nearest(p).1)).collect();
    let sum_ab: f64 = d_ab.iter().sum();
    let sum_ba: f64 = d_ba.iter().sum();
    Ok(0.5 * sum_ab / a.len() as f64 + 0.5 * sum_ba / b.len() as f64)
}

pub fn chamfer_l2(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    chamfer(a, b, false)
}

/// Precision / recall / F at distance threshold tau (strict inequality).
pub fn f_score(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<(f64, f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("f-score needs non-empty point sets"));
    }
    let ga = NnGrid::build(a);
    let gb = NnGrid::build(b);
    let close_ab = a.par_iter().filter(|p| gb.nearest(p).1 < tau).count();
    let close_ba = b.par_iter().filter(|p| ga.nearest(p).1 < tau).count();
    let p = close_ab as f64 / a.len() as f64;
    let r = close_ba as f64 / b.len() as f64;
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok((p, r, f))
}

/// Mean angle in degrees between predicted and reference normals over the
/// mask; both maps are normalized first. Zero-length predictions inside the
/// mask count as 90 degrees and are reported.
pub fn mean_angular_error(
    pred: &ImageF32,
    gt: &ImageF32,
    mask: &ImageF32,
) -> Result<(f64, usize)> {
    if pred.width != gt.width
        || pred.height != gt.height
        || pred.width != mask.width
        || pred.height != mask.height
        || pred.channels != 3
        || gt.channels != 3
    {
        return Err(Error::invalid("angular error needs equal-shaped 3-channel maps"));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut flagged = 0usize;
    for y in 0..pred.height {
        for x in 0..pred.width {
            if mask.get(x, y, 0) <= crate::scene::FOREGROUND_THRESHOLD {
                continue;
            }
            count += 1;
            let p = pred.get3(x, y);
            let g = gt.get3(x, y);
            let pv = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            let gv = Vec3::new(g[0] as f64, g[1] as f64, g[2] as f64);
            if pv.norm() == 0.0 || gv.norm() == 0.0 {
                flagged += 1;
                sum += 90.0;
                continue;
            }
            let cos = pv.normalize().dot(&gv.normalize()).clamp(-1.0, 1.0);
            sum += cos.acos().to_degrees();
        }
    }
    if count == 0 {
        return Err(Error::invalid("mask has no foreground pixels"));
    }
    Ok((sum / count as f64, flagged))
}

/// Visibility-based comparison of a reconstruction against ground truth:
/// both surfaces are sampled by the same foreground rays, then Chamfer and
/// F-score run on those point sets.
pub fn evaluate_scene(
    recon: &TriMesh,
    gt: &TriMesh,
    views: &[NormalView],
    tau: f64,
    squared: bool,
) -> Result<MetricReport> {
    let vp_recon = visible_points(recon, views)?;
    let vp_gt = visible_points(gt, views)?;
    let chamfer_val = chamfer(&vp_recon.points, &vp_gt.points, squared)?;
    let (p, r, f) = f_score(&vp_recon.points, &vp_gt.points, tau)?;
    Ok(MetricReport {
        chamfer_l2: chamfer_val,
        f_score: f,
        precision: p,
        recall: r,
        mean_angular_error_deg: None,
        tau,
        squared_chamfer: squared,
        recon_points: vp_recon.points.len(),
        gt_points: vp_gt.points.len(),
        recon_misses: vp_recon.misses,
        gt_misses: vp_gt.misses,
    })
}
