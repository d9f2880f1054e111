//! App-level orchestration shared by the CLI and the acceptance suite:
//! every command is a library function that takes resolved options and
//! works on directories, so runs are reproducible and testable in-process.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{AnalyticSdf, HashGridConfig, SdfField};
use crate::geometry::AxisConvention;
use crate::grad::{spatial_gradients, GradBackend, GradMode};
use crate::mesh::{self, marching_cubes, MetricReport, TriMesh};
use crate::render::{render_full_view, RenderStrategy};
use crate::sampling::{
    sample_batch, update_occupancy, OccupancyGrid, SampleConfig, SamplerContext, StepSchedule,
};
use crate::scene::{
    self, load_scene, pfm, save_scene, validate_scene, write_json, Finding, NormalsSpace, Scene,
    SceneMeta, Severity,
};
use crate::synth::{synth_views, SynthSpec};
use crate::train::{train, LossWeights, TrainConfig, TrainEvent, TrainReport};
use crate::Vec3;

pub fn shape_by_name(name: &str) -> Result<AnalyticSdf> {
    match name {
        "sphere" => Ok(AnalyticSdf::sphere(Vec3::zeros(), 0.5)),
        "torus" => Ok(AnalyticSdf::torus(Vec3::zeros(), 0.35, 0.12)),
        "union" => Ok(AnalyticSdf::SmoothUnionSpheres {
            center_a: [-0.2, 0.0, 0.0],
            radius_a: 0.3,
            center_b: [0.25, 0.05, 0.0],
            radius_b: 0.25,
            blend: 0.1,
        }),
        other => Err(Error::invalid(format!(
            "unknown shape '{other}' (expected sphere, torus or union)"
        ))),
    }
}

fn manifest(out_dir: &Path, command: &str, options: &impl Serialize) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a, T: Serialize> {
        command: &'a str,
        version: &'a str,
        options: &'a T,
    }
    write_json(
        &out_dir.join("manifest.json"),
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            options,
        },
    )
}

// --- synth -------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SynthOptions {
    pub shape: String,
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub noise_deg: f64,
    pub seed: u64,
    pub second_ring_elevation_deg: Option<f64>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            shape: "sphere".to_string(),
            views: 20,
            width: 128,
            height: 128,
            noise_deg: 0.0,
            seed: 0,
            second_ring_elevation_deg: None,
        }
    }
}

pub fn run_synth(opts: &SynthOptions, out_dir: &Path) -> Result<()> {
    let shape = shape_by_name(&opts.shape)?;
    let mut spec = SynthSpec::new(shape.clone(), opts.views, opts.width, opts.height);
    spec.noise_deg = opts.noise_deg;
    spec.seed = opts.seed;
    spec.second_ring_elevation_deg = opts.second_ring_elevation_deg;
    let (views, gt_mesh) = synth_views(&spec)?;
    let meta = SceneMeta {
        bound_radius: spec.bound_radius,
        axis_convention: AxisConvention::YDown,
        normals_space: NormalsSpace::Camera,
        unit_scale: 1.0,
        n_views: views.len(),
        analytic_gt: Some(shape),
        gt_mesh: Some("gt_mesh.obj".to_string()),
    };
    save_scene(out_dir, &meta, &views, Some(&gt_mesh))?;
    manifest(out_dir, "synth", opts)
}

// --- train -------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TrainOptions {
    pub grad_mode: String,
    pub batches: usize,
    pub patches: usize,
    pub patch: usize,
    pub lr: f64,
    pub step_start: f64,
    pub step_end: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub mc_res: u32,
    pub hash_levels: usize,
    pub hash_features: usize,
    pub hash_base_res: u32,
    pub hash_finest_res: u32,
    pub hash_table_log2: u32,
    pub occupancy_res: u32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let hash = HashGridConfig::standard();
        TrainOptions {
            grad_mode: "dfd".to_string(),
            batches: 5000,
            patches: 2048,
            patch: 3,
            lr: 5e-3,
            step_start: 1e-2,
            step_end: 5e-4,
            seed: 0,
            deterministic: false,
            mc_res: 256,
            hash_levels: hash.levels,
            hash_features: hash.features_per_level,
            hash_base_res: hash.base_resolution,
            hash_finest_res: 2048,
            hash_table_log2: hash.table_size_log2,
            occupancy_res: 128,
        }
    }
}

impl TrainOptions {
    /// CPU-minutes preset used by tests and benches.
    pub fn desk() -> Self {
        TrainOptions {
            patches: 512,
            batches: 1500,
            hash_finest_res: 256,
            hash_table_log2: 16,
            ..Self::default()
        }
    }

    pub fn to_config(&self, bound_radius: f64) -> Result<TrainConfig> {
        let backend: GradBackend = self.grad_mode.parse()?;
        let cfg = TrainConfig {
            batches: self.batches,
            patches_per_batch: self.patches,
            patch_size: self.patch,
            lr_init: self.lr,
            lr_final: (self.lr * 0.06).min(3e-4),
            warmup_batches: (self.batches / 10).clamp(1, 100),
            step_start: self.step_start,
            step_end: self.step_end,
            seed: self.seed,
            deterministic: self.deterministic,
            backend,
            weights: LossWeights::default(),
            hash: HashGridConfig::from_finest(
                self.hash_levels,
                self.hash_features,
                self.hash_base_res,
                self.hash_finest_res,
                self.hash_table_log2,
                bound_radius,
            ),
            init_radius: 0.7,
            init_sharpness: 100.0,
            occupancy_resolution: self.occupancy_res,
            occupancy_every: 8,
            snapshot_every: 50,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub batches_run: usize,
    pub final_loss: Option<f64>,
    pub forward_sdf_evals: u64,
    pub gradient_extra_evals: u64,
    pub backward_samples: u64,
    pub fwd_ms_total: f64,
    pub bwd_ms_total: f64,
    pub total_ms: f64,
    pub culled_stencil_samples: u64,
    pub skipped_views: Vec<u32>,
    pub diverged_at: Option<usize>,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
}

/// Fail on Error-level findings before touching the trainer.
fn require_valid_scene(scene_dir: &Path) -> Result<Vec<Finding>> {
    let findings = validate_scene(scene_dir);
    let errors: Vec<&Finding> = findings
        .iter()
        .filter(|f| f.severity == Severity::Error)
        .collect();
    if !errors.is_empty() {
        let mut msg = String::from("scene validation failed:\n");
        for f in &errors {
            let _ = writeln!(msg, "  [{}] {}", f.code, f.message);
        }
        return Err(Error::invalid(msg));
    }
    Ok(findings)
}

pub fn run_train(scene_dir: &Path, opts: &TrainOptions, out_dir: &Path) -> Result<TrainSummary> {
    run_train_with_progress(scene_dir, opts, out_dir, 0)
}

/// `progress_every` > 0 prints one status line per that many batches.
pub fn run_train_with_progress(
    scene_dir: &Path,
    opts: &TrainOptions,
    out_dir: &Path,
    progress_every: usize,
) -> Result<TrainSummary> {
    require_valid_scene(scene_dir)?;
    let scene = load_scene(scene_dir)?;
    let config = opts.to_config(scene.meta.bound_radius)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut sink = |e: TrainEvent| {
        if progress_every == 0 {
            return;
        }
        match e {
            TrainEvent::BatchDone(m) if m.batch % progress_every == 0 => {
                eprintln!(
                    "batch {:>6}  loss {:.4e}  (normal {:.3e} mask {:.3e} eik {:.3e})  step {:.2e}",
                    m.batch, m.loss.total, m.loss.normal, m.loss.mask, m.loss.eikonal, m.step_size
                );
            }
            TrainEvent::Diverged { batch, detail } => {
                eprintln!("batch {batch}: bad loss, skipping optimizer step ({detail})");
            }
            _ => {}
        }
    };
    let (field, report) = train(&scene.views, &config, &mut sink)?;

    field.save(&out_dir.join("checkpoint.bin"))?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &report, opts.deterministic)?;

    let mut mesh = marching_cubes(&field, opts.mc_res, 0.0, scene.meta.bound_radius)?;
    mesh.cleanup();
    mesh::write_obj(&out_dir.join("mesh.obj"), &mesh)?;

    let summary = TrainSummary {
        batches_run: report.metrics.len(),
        final_loss: report.metrics.last().map(|m| m.loss.total),
        forward_sdf_evals: report.counter.forward_sdf_evals(),
        gradient_extra_evals: report.counter.gradient_extra,
        backward_samples: report.backward_samples,
        fwd_ms_total: if opts.deterministic { 0.0 } else { report.fwd_ms_total },
        bwd_ms_total: if opts.deterministic { 0.0 } else { report.bwd_ms_total },
        total_ms: if opts.deterministic {
            0.0
        } else {
            report.fwd_ms_total + report.bwd_ms_total
        },
        culled_stencil_samples: report.culled_stencil_samples,
        skipped_views: report.skipped_views.clone(),
        diverged_at: report.diverged_at,
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
    };
    write_json(&out_dir.join("train_summary.json"), &summary)?;
    manifest(out_dir, "train", opts)?;
    if let Some(batch) = report.diverged_at {
        return Err(Error::Diverged {
            batch,
            detail: "training aborted; last good checkpoint written".to_string(),
        });
    }
    Ok(summary)
}

/// Per-batch CSV. Timing columns are zeroed under --deterministic so outputs
/// are byte-identical across runs.
fn write_metrics_csv(path: &Path, report: &TrainReport, deterministic: bool) -> Result<()> {
    let mut text = String::from(
        "batch,loss_total,loss_normal,loss_mask,loss_eik,step_size,fwd_ms,bwd_ms,sdf_evals\n",
    );
    for m in &report.metrics {
        let (fwd, bwd) = if deterministic {
            (0.0, 0.0)
        } else {
            (m.fwd_ms, m.bwd_ms)
        };
        let _ = writeln!(
            text,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{fwd:.3},{bwd:.3},{}",
            m.batch,
            m.loss.total,
            m.loss.normal,
            m.loss.mask,
            m.loss.eikonal,
            m.step_size,
            m.sdf_evals
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// --- render ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RenderOptions {
    pub mode: String,
    pub views: Vec<usize>,
    pub step: f64,
}

pub fn run_render(
    checkpoint: &Path,
    scene_dir: &Path,
    opts: &RenderOptions,
    out_dir: &Path,
) -> Result<()> {
    let field = SdfField::load(checkpoint)?;
    let scene = load_scene(scene_dir)?;
    let strategy: RenderStrategy = opts.mode.parse()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut grid = OccupancyGrid::new(128, field.bound_radius());
    update_occupancy(&mut grid, &field);
    let sharpness = field.sharpness();
    let budget = crate::train::interior_budget(sharpness, opts.step);

    for &vi in &opts.views {
        let view = scene
            .views
            .get(vi)
            .ok_or_else(|| Error::invalid(format!("view {vi} out of range")))?;
        let rendered = render_full_view(
            &field,
            &view.camera,
            strategy,
            opts.step,
            sharpness,
            &grid,
            budget,
        )?;
        // Export normalized normals; raw accumulation is an internal detail.
        let mut normals = rendered.normals.clone();
        for px in normals.data.chunks_exact_mut(3) {
            let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
            if n > 0.0 {
                px[0] /= n;
                px[1] /= n;
                px[2] /= n;
            }
        }
        pfm::write_pfm(&out_dir.join(format!("normal_render_{vi:03}.pfm")), &normals)?;
        pfm::write_pfm(&out_dir.join(format!("opacity_{vi:03}.pfm")), &rendered.opacity)?;
        if strategy == RenderStrategy::SrAd {
            pfm::write_pfm(&out_dir.join(format!("validity_{vi:03}.pfm")), &rendered.validity)?;
        }
    }
    manifest(out_dir, "render-normals", opts)
}

// --- eval --------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EvalOptions {
    pub tau: f64,
    pub squared: bool,
    pub gt_mc_res: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tau: 5e-3,
            squared: false,
            gt_mc_res: 256,
        }
    }
}

pub fn run_eval(
    mesh_path: &Path,
    scene_dir: &Path,
    gt_mesh_path: Option<&Path>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let recon = read_mesh_any(mesh_path)?;
    let scene = load_scene(scene_dir)?;
    let gt = match gt_mesh_path {
        Some(p) => read_mesh_any(p)?,
        None => scene.gt_mesh_or_analytic(opts.gt_mc_res)?,
    };
    evaluate_meshes(&recon, &gt, &scene, opts)
}

pub fn evaluate_meshes(
    recon: &TriMesh,
    gt: &TriMesh,
    scene: &Scene,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    mesh::evaluate_scene(recon, gt, &scene.views, opts.tau, opts.squared)
}

fn read_mesh_any(path: &Path) -> Result<TriMesh> {
    let mesh = if path.extension().and_then(|e| e.to_str()) == Some("ply") {
        mesh::read_ply(path)?
    } else {
        mesh::read_obj(path)?
    };
    mesh.validate()?;
    Ok(mesh)
}

// --- bench -------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchOptions {
    pub modes: Vec<String>,
    pub batches: usize,
    pub patches: usize,
    pub seed: u64,
    pub mc_res: u32,
    pub hash_finest_res: u32,
    pub hash_table_log2: u32,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            modes: vec!["dfd".into(), "fd".into(), "ad".into()],
            batches: 300,
            patches: 512,
            seed: 0,
            mc_res: 128,
            hash_finest_res: 256,
            hash_table_log2: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub forward_evals: u64,
    pub gradient_extra_evals: u64,
    pub backward_ops: u64,
    pub fwd_ms: f64,
    pub bwd_ms: f64,
    pub total_ms: f64,
    pub chamfer: f64,
    pub mean_angular_err_vs_analytic_deg: f64,
}

/// Identical training workloads per gradient backend; emits the phase
/// timings, evaluation counts, reconstruction quality and the angular gap
/// between each backend's gradients and the exact ones on a probe batch.
pub fn run_bench(scene_dir: &Path, opts: &BenchOptions, out_dir: &Path) -> Result<Vec<BenchRow>> {
    require_valid_scene(scene_dir)?;
    let scene = load_scene(scene_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let gt = scene.gt_mesh_or_analytic(256)?;

    let mut rows = Vec::new();
    for mode_name in &opts.modes {
        let topts = TrainOptions {
            grad_mode: mode_name.clone(),
            batches: opts.batches,
            patches: opts.patches,
            seed: opts.seed,
            mc_res: opts.mc_res,
            hash_finest_res: opts.hash_finest_res,
            hash_table_log2: opts.hash_table_log2,
            ..TrainOptions::default()
        };
        let config = topts.to_config(scene.meta.bound_radius)?;
        let mut sink = |_e: TrainEvent| {};
        let (field, report) = train(&scene.views, &config, &mut sink)?;

        let mut mesh = marching_cubes(&field, opts.mc_res, 0.0, scene.meta.bound_radius)?;
        mesh.cleanup();
        let chamfer = if mesh.triangles.is_empty() {
            f64::INFINITY
        } else {
            let vp_recon = mesh::visible_points(&mesh, &scene.views)?;
            let vp_gt = mesh::visible_points(&gt, &scene.views)?;
            mesh::chamfer_l2(&vp_recon.points, &vp_gt.points)?
        };
        let gap = gradient_gap_vs_analytic(&field, &scene, &config)?;
        rows.push(BenchRow {
            mode: mode_name.clone(),
            forward_evals: report.counter.forward_sdf_evals(),
            gradient_extra_evals: report.counter.gradient_extra,
            backward_ops: report.backward_samples,
            fwd_ms: report.fwd_ms_total,
            bwd_ms: report.bwd_ms_total,
            total_ms: report.fwd_ms_total + report.bwd_ms_total,
            chamfer,
            mean_angular_err_vs_analytic_deg: gap,
        });
    }

    let mut csv = String::from(
        "mode,forward_evals,gradient_extra_evals,backward_ops,fwd_ms,bwd_ms,total_ms,chamfer,mean_angular_err_vs_analytic_deg\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.1},{:.1},{:.1},{:.6e},{:.4}",
            r.mode,
            r.forward_evals,
            r.gradient_extra_evals,
            r.backward_ops,
            r.fwd_ms,
            r.bwd_ms,
            r.total_ms,
            r.chamfer,
            r.mean_angular_err_vs_analytic_deg
        );
    }
    std::fs::write(out_dir.join("bench_grad.csv"), csv)
        .map_err(|e| Error::io(out_dir.join("bench_grad.csv"), e))?;
    manifest(out_dir, "bench-grad", opts)?;
    Ok(rows)
}

/// Mean angle between the trained field's mode gradients and its exact
/// gradients on one deterministic probe batch.
fn gradient_gap_vs_analytic(field: &SdfField, scene: &Scene, config: &TrainConfig) -> Result<f64> {
    use rand::SeedableRng;
    let patch_radius = (config.patch_size / 2) as u32;
    let bases: Result<Vec<_>> = scene
        .views
        .iter()
        .map(|v| v.build_bases(patch_radius))
        .collect();
    let bases = bases?;
    let ctx = SamplerContext::build(&scene.views, patch_radius)?;
    let mut grid = OccupancyGrid::new(config.occupancy_resolution, scene.meta.bound_radius);
    update_occupancy(&mut grid, field);
    let step = StepSchedule::new(config.step_start, config.step_end, config.batches)
        .step(config.batches);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0xbead);
    let samples = sample_batch(
        &scene.views,
        &bases,
        &ctx,
        &grid,
        step,
        &SampleConfig {
            n_patches: 64,
            patch_size: config.patch_size,
            jitter: false,
            interior_budget: crate::train::interior_budget(field.sharpness(), step),
        },
        &mut rng,
    )?;
    if samples.n_points() == 0 {
        return Ok(f64::NAN);
    }
    let mode = config.backend.to_mode(step);
    let estimated = spatial_gradients(field, &samples, mode)?;
    let exact = spatial_gradients(field, &samples, GradMode::Analytic)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..samples.n_points() {
        if !estimated.valid[i] {
            continue;
        }
        let (a, b) = (estimated.gradients[i], exact.gradients[i]);
        if a.norm() == 0.0 || b.norm() == 0.0 {
            continue;
        }
        sum += a
            .normalize()
            .dot(&b.normalize())
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees();
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

// --- validate ----------------------------------------------------------------

pub fn run_validate(scene_dir: &Path) -> Vec<Finding> {
    validate_scene(scene_dir)
}

/// The gt mesh path a scene declares, if any.
pub fn scene_dir_gt_path(scene_dir: &Path) -> Option<PathBuf> {
    let meta: SceneMeta = scene::read_json(&scene_dir.join("scene.json")).ok()?;
    meta.gt_mesh.map(|name| scene_dir.join(name))
}
