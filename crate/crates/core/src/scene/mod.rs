//! Scene directories: cameras.json + scene.json + per-view PFM normal maps
//! and masks, with loading, saving and validation.

pub mod image;
pub mod pfm;
mod view;

pub use image::ImageF32;
pub use view::{NormalView, FOREGROUND_THRESHOLD};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::AnalyticSdf;
use crate::geometry::{camera_to_world_normals, AxisConvention, Camera};
use crate::mesh::TriMesh;
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalsSpace {
    Camera,
    World,
}

/// scene.json: global facts a directory of views needs to be interpreted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub bound_radius: f64,
    pub axis_convention: AxisConvention,
    pub normals_space: NormalsSpace,
    /// Scene units per "scene-mm" for threshold bookkeeping (the evaluation
    /// default tau of 5e-3 scene units corresponds to 0.5 scene-mm when a
    /// unit-bound object stands in for a ~10 cm original).
    pub unit_scale: f64,
    pub n_views: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic_gt: Option<AnalyticSdf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_mesh: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Row-major world-from-camera rotation.
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CamerasFile {
    views: Vec<CameraRecord>,
}

impl CameraRecord {
    fn from_camera(cam: &Camera) -> Self {
        let m = &cam.rotation_world_from_cam;
        CameraRecord {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            r: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            t: [
                cam.translation_world_from_cam.x,
                cam.translation_world_from_cam.y,
                cam.translation_world_from_cam.z,
            ],
        }
    }

    fn to_camera(&self, convention: AxisConvention) -> Result<Camera> {
        let r = Mat3::new(
            self.r[0], self.r[1], self.r[2], self.r[3], self.r[4], self.r[5], self.r[6],
            self.r[7], self.r[8],
        );
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            r,
            Vec3::new(self.t[0], self.t[1], self.t[2]),
            convention,
        )
    }
}

pub fn normal_map_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("normal_{view:03}.pfm"))
}

pub fn mask_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("mask_{view:03}.pfm"))
}

/// A loaded scene: views hold world-space normals regardless of the on-disk
/// normals_space.
pub struct Scene {
    pub meta: SceneMeta,
    pub views: Vec<NormalView>,
    pub gt_mesh: Option<TriMesh>,
    /// Normals that needed renormalization while converting to world space.
    pub renormalized: usize,
}

impl Scene {
    pub fn gt_mesh_or_analytic(&self, mc_resolution: u32) -> Result<TriMesh> {
        if let Some(mesh) = &self.gt_mesh {
            return Ok(mesh.clone());
        }
        if let Some(shape) = &self.meta.analytic_gt {
            return crate::mesh::marching_cubes(shape, mc_resolution, 0.0, self.meta.bound_radius);
        }
        Err(Error::invalid(
            "scene has neither a gt mesh nor an analytic ground-truth shape",
        ))
    }
}

/// Write a complete scene directory. Views are given with world-space
/// normals; when `meta.normals_space` is Camera they are rotated into each
/// camera frame on disk (the loader rotates them back).
pub fn save_scene(dir: &Path, meta: &SceneMeta, views: &[NormalView], gt_mesh: Option<&TriMesh>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if meta.n_views != views.len() {
        return Err(Error::invalid(format!(
            "meta.n_views = {} but {} views given",
            meta.n_views,
            views.len()
        )));
    }
    let cameras = CamerasFile {
        views: views.iter().map(|v| CameraRecord::from_camera(&v.camera)).collect(),
    };
    write_json(&dir.join("cameras.json"), &cameras)?;
    write_json(&dir.join("scene.json"), meta)?;
    for (i, view) in views.iter().enumerate() {
        let normals = match meta.normals_space {
            NormalsSpace::World => view.normals.clone(),
            NormalsSpace::Camera => {
                let mut img = view.normals.clone();
                let rt = view.camera.rotation_world_from_cam.transpose();
                for px in img.data.chunks_exact_mut(3) {
                    let w = Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64);
                    let c = rt * w;
                    px[0] = c.x as f32;
                    px[1] = c.y as f32;
                    px[2] = c.z as f32;
                }
                img
            }
        };
        pfm::write_pfm(&normal_map_path(dir, i), &normals)?;
        pfm::write_pfm(&mask_path(dir, i), &view.mask)?;
    }
    if let Some(mesh) = gt_mesh {
        let name = meta.gt_mesh.as_deref().unwrap_or("gt_mesh.obj");
        crate::mesh::write_obj(&dir.join(name), mesh)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, format!("serialize: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let meta: SceneMeta = read_json(&dir.join("scene.json"))?;
    let cameras: CamerasFile = read_json(&dir.join("cameras.json"))?;
    if cameras.views.len() != meta.n_views {
        return Err(Error::format(
            dir.join("cameras.json"),
            format!(
                "scene.json declares {} views, cameras.json has {}",
                meta.n_views,
                cameras.views.len()
            ),
        ));
    }
    let mut views = Vec::with_capacity(meta.n_views);
    let mut renormalized = 0usize;
    for (i, rec) in cameras.views.iter().enumerate() {
        let camera = rec.to_camera(meta.axis_convention)?;
        let normals_raw = pfm::read_pfm(&normal_map_path(dir, i))?;
        let mask = pfm::read_pfm(&mask_path(dir, i))?;
        if normals_raw.channels != 3 || mask.channels != 1 {
            return Err(Error::format(
                dir.to_path_buf(),
                format!("view {i}: normal map must be 3-channel and mask 1-channel"),
            ));
        }
        if normals_raw.width != camera.width
            || normals_raw.height != camera.height
            || mask.width != camera.width
            || mask.height != camera.height
        {
            return Err(Error::format(
                dir.to_path_buf(),
                format!("view {i}: image sizes do not match the camera"),
            ));
        }
        let normals = match meta.normals_space {
            NormalsSpace::World => normals_raw,
            NormalsSpace::Camera => {
                let chunks: Vec<[f32; 3]> = normals_raw
                    .data
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect();
                let (world, renorm) = camera_to_world_normals(&camera, &chunks);
                renormalized += renorm;
                ImageF32::from_data(
                    normals_raw.width,
                    normals_raw.height,
                    3,
                    world.into_iter().flatten().collect(),
                )?
            }
        };
        views.push(NormalView {
            camera,
            normals,
            mask,
        });
    }
    let gt_mesh = match &meta.gt_mesh {
        Some(name) => {
            let p = dir.join(name);
            let mesh = if name.ends_with(".ply") {
                crate::mesh::read_ply(&p)?
            } else {
                crate::mesh::read_obj(&p)?
            };
            Some(mesh)
        }
        None => None,
    };
    Ok(Scene {
        meta,
        views,
        gt_mesh,
        renormalized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: &'static str,
    pub message: String,
}

impl Finding {
    fn error(code: &'static str, message: String) -> Self {
        Finding {
            severity: Severity::Error,
            code,
            message,
        }
    }

    fn warning(code: &'static str, message: String) -> Self {
        Finding {
            severity: Severity::Warning,
            code,
            message,
        }
    }
}

/// Check a scene directory against the format invariants. Returns findings
/// rather than failing: a structurally broken directory yields Error-level
/// findings.
pub fn validate_scene(dir: &Path) -> Vec<Finding> {
    let mut findings = Vec::new();
    let meta: SceneMeta = match read_json(&dir.join("scene.json")) {
        Ok(m) => m,
        Err(e) => {
            findings.push(Finding::error("scene-json", e.to_string()));
            return findings;
        }
    };
    let cameras: CamerasFile = match read_json(&dir.join("cameras.json")) {
        Ok(c) => c,
        Err(e) => {
            findings.push(Finding::error("cameras-json", e.to_string()));
            return findings;
        }
    };
    if cameras.views.len() != meta.n_views {
        findings.push(Finding::error(
            "view-count",
            format!(
                "scene.json declares {} views, cameras.json has {}",
                meta.n_views,
                cameras.views.len()
            ),
        ));
    }
    if let Some(name) = &meta.gt_mesh {
        if !dir.join(name).exists() {
            findings.push(Finding::error(
                "gt-mesh-missing",
                format!("declared gt mesh '{name}' not found"),
            ));
        }
    }
    for (i, rec) in cameras.views.iter().enumerate() {
        let camera = match rec.to_camera(meta.axis_convention) {
            Ok(c) => c,
            Err(e) => {
                findings.push(Finding::error(
                    "camera-invalid",
                    format!("view {i}: {e}"),
                ));
                continue;
            }
        };
        let npath = normal_map_path(dir, i);
        let mpath = mask_path(dir, i);
        let normals = match pfm::read_pfm(&npath) {
            Ok(img) => img,
            Err(e) => {
                findings.push(Finding::error("normal-map", format!("view {i}: {e}")));
                continue;
            }
        };
        let mask = match pfm::read_pfm(&mpath) {
            Ok(img) => img,
            Err(e) => {
                findings.push(Finding::error("mask-map", format!("view {i}: {e}")));
                continue;
            }
        };
        if normals.channels != 3 {
            findings.push(Finding::error(
                "normal-channels",
                format!("view {i}: normal map has {} channels", normals.channels),
            ));
            continue;
        }
        if mask.channels != 1 {
            findings.push(Finding::error(
                "mask-channels",
                format!("view {i}: mask has {} channels", mask.channels),
            ));
            continue;
        }
        if normals.width != camera.width
            || normals.height != camera.height
            || mask.width != camera.width
            || mask.height != camera.height
        {
            findings.push(Finding::error(
                "image-size",
                format!("view {i}: image sizes do not match the {}x{} camera", camera.width, camera.height),
            ));
            continue;
        }

        // Unit-normal statistics over the foreground.
        let mut fg = 0usize;
        let mut off_unit = 0usize;
        let mut zero_fg = 0usize;
        let mut facing_wrong = 0usize;
        let fwd = camera.optical_axis();
        for y in 0..camera.height {
            for x in 0..camera.width {
                if mask.get(x, y, 0) <= FOREGROUND_THRESHOLD {
                    continue;
                }
                fg += 1;
                let n = normals.get3(x, y);
                let v = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
                let len = v.norm();
                if len == 0.0 {
                    zero_fg += 1;
                    continue;
                }
                if (len - 1.0).abs() > 1e-2 {
                    off_unit += 1;
                }
                let world = match meta.normals_space {
                    NormalsSpace::World => v / len,
                    NormalsSpace::Camera => (camera.rotation_world_from_cam * v) / len,
                };
                // A visible surface normal points against the viewing axis.
                if world.dot(&fwd) > 0.2 {
                    facing_wrong += 1;
                }
            }
        }
        if fg == 0 {
            findings.push(Finding::warning(
                "empty-foreground",
                format!("view {i}: mask has no foreground pixels"),
            ));
            continue;
        }
        if zero_fg > 0 {
            findings.push(Finding::warning(
                "zero-normals",
                format!("view {i}: {zero_fg} foreground pixels have zero normals"),
            ));
        }
        if off_unit * 100 > fg {
            findings.push(Finding::warning(
                "non-unit-normals",
                format!(
                    "view {i}: {off_unit}/{fg} foreground normals deviate from unit length by >1e-2"
                ),
            ));
        }
        if facing_wrong * 10 > fg {
            findings.push(Finding::warning(
                "normal-orientation",
                format!(
                    "view {i}: {facing_wrong}/{fg} foreground normals face away from the camera"
                ),
            ));
        }
    }
    findings
}
