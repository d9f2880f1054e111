//! SDF-based volume rendering: opacities from consecutive SDF samples,
//! transmittance compositing, and patch-parallel accumulation of normals
//! and opacity.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{direction_basis, pixel_ray, Camera};
use crate::grad::{
    build_fd_stencil, dfd_from_values, fd_backprop_to_stencil, gradients_from_stencil,
    DifferentiableSdf, EvalCounter, FdStencil, GradMode,
};
use crate::sampling::{march_center_ray, plane_extend, OccupancyGrid, PatchSampleSet};
use crate::scene::image::ImageF32;
use crate::Vec3;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Opacity of the interval between two consecutive SDF samples on a ray,
/// with sharpness `s`: max((phi(f_i) - phi(f_next)) / phi(f_i), 0).
///
/// When phi(f_i) underflows the ratio is resolved by sign: a crossing from
/// outside to inside saturates to 1, anything else contributes 0.
pub fn sdf_to_alpha(f_i: f64, f_next: f64, s: f64) -> f64 {
    debug_assert!(s > 0.0);
    let phi_i = sigmoid(s * f_i);
    if phi_i < f64::MIN_POSITIVE {
        return if f_i > 0.0 && f_next < 0.0 { 1.0 } else { 0.0 };
    }
    let phi_n = sigmoid(s * f_next);
    ((phi_i - phi_n) / phi_i).clamp(0.0, 1.0)
}

/// Alpha plus its partial derivatives wrt (f_i, f_next, s). Zero outside the
/// active branch of the clamp.
pub(crate) fn sdf_to_alpha_grad(f_i: f64, f_next: f64, s: f64) -> (f64, f64, f64, f64) {
    let phi_i = sigmoid(s * f_i);
    if phi_i < f64::MIN_POSITIVE {
        let a = if f_i > 0.0 && f_next < 0.0 { 1.0 } else { 0.0 };
        return (a, 0.0, 0.0, 0.0);
    }
    let phi_n = sigmoid(s * f_next);
    let r = phi_n / phi_i;
    let alpha = 1.0 - r;
    if alpha <= 0.0 {
        return (0.0, 0.0, 0.0, 0.0);
    }
    if alpha >= 1.0 {
        return (1.0, 0.0, 0.0, 0.0);
    }
    let da_dfi = r * s * (1.0 - phi_i);
    let da_dfn = -r * s * (1.0 - phi_n);
    let da_ds = -r * (f_next * (1.0 - phi_n) - f_i * (1.0 - phi_i));
    (alpha, da_dfi, da_dfn, da_ds)
}

/// Front-to-back compositing of one ray. Transmittance is updated as
/// T <- T - w so it can never go negative and opacity can never exceed 1.
pub fn composite(alphas: &[f64], grads: &[Vec3]) -> (Vec3, f64, Vec<f64>) {
    debug_assert_eq!(alphas.len(), grads.len());
    let mut weights = Vec::with_capacity(alphas.len());
    let mut transmittance = 1.0f64;
    let mut normal = Vec3::zeros();
    let mut opacity = 0.0f64;
    for (a, g) in alphas.iter().zip(grads.iter()) {
        let w = transmittance * a;
        weights.push(w);
        normal += w * g;
        opacity += w;
        transmittance -= w;
    }
    (normal, opacity.min(1.0), weights)
}

/// Rendered quantities for one patch: per-pixel accumulated (raw) normals
/// and opacities.
#[derive(Debug, Clone)]
pub struct RenderedPatch {
    pub normal_hat: Vec<Vec3>,
    pub opacity_hat: Vec<f64>,
}

/// Everything the loss and its backward pass need from one forward render.
pub struct RenderBatch {
    pub mode: GradMode,
    pub sharpness: f64,
    /// SDF values at every sample point.
    pub values: Vec<f64>,
    /// Spatial gradients at every sample point (mode-dependent estimator).
    pub gradients: Vec<Vec3>,
    pub grad_valid: Vec<bool>,
    /// Per-point alpha (terminal samples of each ray get 0).
    pub alphas: Vec<f64>,
    /// Per-point compositing weight T_i alpha_i.
    pub weights: Vec<f64>,
    pub patches: Vec<RenderedPatch>,
    pub counter: EvalCounter,
    /// FD-mode bookkeeping for the backward pass.
    pub fd_stencil: Option<(FdStencil, f64)>,
    pub culled: usize,
}

/// Evaluate the field once over all sample positions, derive per-mode
/// spatial gradients, and composite every pixel ray of every patch.
pub fn render_patches<F: DifferentiableSdf>(
    field: &F,
    samples: &PatchSampleSet,
    mode: GradMode,
    sharpness: f64,
) -> Result<RenderBatch> {
    let n = samples.n_points();
    let area = samples.patch_area();
    let mut counter = EvalCounter::default();

    let (values, gradients, grad_valid, fd_stencil, culled) = match mode {
        GradMode::Analytic => {
            let (values, gradients) = field.values_and_gradients(&samples.positions)?;
            counter.rendering += n as u64;
            (values, gradients, vec![true; n], None, 0)
        }
        GradMode::Dfd => {
            let values = field.values(&samples.positions)?;
            counter.rendering += n as u64;
            let (gradients, valid) = dfd_from_values(samples, &values)?;
            (values, gradients, valid, None, 0)
        }
        GradMode::AxisFd { epsilon } => {
            if epsilon <= 0.0 {
                return Err(Error::invalid("finite-difference step must be positive"));
            }
            let values = field.values(&samples.positions)?;
            counter.rendering += n as u64;
            let stencil = build_fd_stencil(&samples.positions, epsilon, field.bound_radius());
            let stencil_values = field.values(&stencil.positions)?;
            counter.gradient_extra += stencil.positions.len() as u64;
            let (gradients, valid) =
                gradients_from_stencil(&stencil, &stencil_values, epsilon, n);
            let culled = stencil.culled;
            (values, gradients, valid, Some((stencil, epsilon)), culled)
        }
    };

    let mut alphas = vec![0.0f64; n];
    for range in &samples.patch_ranges {
        for s in range.clone() {
            if s + 1 >= range.end {
                continue; // terminal sample: alpha stays 0
            }
            for slot in 0..area {
                let i = samples.point(s, slot);
                let j = samples.point(s + 1, slot);
                alphas[i] = sdf_to_alpha(values[i], values[j], sharpness);
            }
        }
    }

    let mut weights = vec![0.0f64; n];
    let patches: Vec<RenderedPatch> = samples
        .patch_ranges
        .par_iter()
        .map(|range| {
            let mut patch = RenderedPatch {
                normal_hat: vec![Vec3::zeros(); area],
                opacity_hat: vec![0.0; area],
            };
            let mut w_local = Vec::new();
            for slot in 0..area {
                let ray_alphas: Vec<f64> = range
                    .clone()
                    .map(|s| alphas[samples.point(s, slot)])
                    .collect();
                let ray_grads: Vec<Vec3> = range
                    .clone()
                    .map(|s| {
                        let i = samples.point(s, slot);
                        if grad_valid[i] {
                            gradients[i]
                        } else {
                            Vec3::zeros()
                        }
                    })
                    .collect();
                let (normal, opacity, w) = composite(&ray_alphas, &ray_grads);
                patch.normal_hat[slot] = normal;
                patch.opacity_hat[slot] = opacity;
                w_local.push(w);
            }
            (patch, w_local)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(pi, (patch, w_local))| {
            let range = &samples.patch_ranges[pi];
            for (slot, ws) in w_local.iter().enumerate() {
                for (k, s) in range.clone().enumerate() {
                    weights[samples.point(s, slot)] = ws[k];
                }
            }
            patch
        })
        .collect();

    Ok(RenderBatch {
        mode,
        sharpness,
        values,
        gradients,
        grad_valid,
        alphas,
        weights,
        patches,
        counter,
        fd_stencil,
        culled,
    })
}

/// Backward helper: distribute loss adjoints on (weights, per-point
/// gradients) into per-point value adjoints and the sharpness adjoint.
///
/// `weight_adj[i] = dL/dw_i` and `grad_adj[i] = dL/d grad_i`. The alpha
/// chain runs the transmittance recurrence backwards per ray without any
/// division, so saturated alphas stay finite.
pub struct RenderAdjoints {
    pub value_adj: Vec<f64>,
    pub sharpness_adj: f64,
}

pub fn backprop_weights_to_values(
    samples: &PatchSampleSet,
    batch: &RenderBatch,
    weight_adj: &[f64],
) -> RenderAdjoints {
    let area = samples.patch_area();
    let mut value_adj = vec![0.0f64; samples.n_points()];
    let mut sharp_adj = 0.0f64;
    for range in &samples.patch_ranges {
        if range.is_empty() {
            continue;
        }
        for slot in 0..area {
            let len = range.len();
            // Recover the transmittance sequence exactly as composited.
            let mut trans = Vec::with_capacity(len);
            let mut tcur = 1.0f64;
            for s in range.clone() {
                let i = samples.point(s, slot);
                trans.push(tcur);
                tcur -= batch.weights[i];
            }
            // dL/dalpha_k = T_k (A_k - B_{k+1}), with B the running adjoint
            // of the transmittance — no division, so saturated alphas are
            // safe.
            let mut alpha_adj = vec![0.0f64; len];
            let mut b = 0.0f64;
            for (k, s) in range.clone().enumerate().rev() {
                let i = samples.point(s, slot);
                let a_k = batch.alphas[i];
                let adj_w = weight_adj[i];
                alpha_adj[k] = trans[k] * (adj_w - b);
                b = adj_w * a_k + b * (1.0 - a_k);
            }
            for (k, s) in range.clone().enumerate() {
                if k + 1 >= len {
                    break; // terminal alpha is constant zero
                }
                let i = samples.point(s, slot);
                let j = samples.point(s + 1, slot);
                let (_, da_dfi, da_dfn, da_ds) =
                    sdf_to_alpha_grad(batch.values[i], batch.values[j], batch.sharpness);
                value_adj[i] += alpha_adj[k] * da_dfi;
                value_adj[j] += alpha_adj[k] * da_dfn;
                sharp_adj += alpha_adj[k] * da_ds;
            }
        }
    }
    RenderAdjoints {
        value_adj,
        sharpness_adj: sharp_adj,
    }
}

/// FD-mode: pull per-point gradient adjoints onto the stencil evaluations.
pub fn fd_gradient_adjoints<'a>(
    batch: &'a RenderBatch,
    grad_adj: &[Vec3],
) -> Option<(Vec<f64>, &'a FdStencil)> {
    batch
        .fd_stencil
        .as_ref()
        .map(|(stencil, eps)| (fd_backprop_to_stencil(stencil, grad_adj, *eps), stencil))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderStrategy {
    VrDfd,
    VrAd,
    VrFd,
    SrAd,
}

impl std::str::FromStr for RenderStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vr-dfd" => Ok(RenderStrategy::VrDfd),
            "vr-ad" => Ok(RenderStrategy::VrAd),
            "vr-fd" => Ok(RenderStrategy::VrFd),
            "sr-ad" => Ok(RenderStrategy::SrAd),
            other => Err(Error::invalid(format!(
                "unknown render strategy '{other}' (expected vr-dfd, vr-ad, vr-fd or sr-ad)"
            ))),
        }
    }
}

impl RenderStrategy {
    pub fn name(self) -> &'static str {
        match self {
            RenderStrategy::VrDfd => "vr-dfd",
            RenderStrategy::VrAd => "vr-ad",
            RenderStrategy::VrFd => "vr-fd",
            RenderStrategy::SrAd => "sr-ad",
        }
    }
}

pub struct RenderedView {
    /// Raw accumulated normals (not normalized), zero on background.
    pub normals: ImageF32,
    pub opacity: ImageF32,
    /// 1 where the strategy produced a defined result (surface rendering
    /// marks non-converged pixels 0).
    pub validity: ImageF32,
    pub counter: EvalCounter,
}

/// Render a whole view with one of the inference strategies: tiled
/// patch-based volume rendering, or sphere-traced surface rendering.
/// `interior_budget` is the occluded-space cutoff passed to the marcher.
pub fn render_full_view<F: DifferentiableSdf>(
    field: &F,
    cam: &Camera,
    strategy: RenderStrategy,
    step: f64,
    sharpness: f64,
    grid: &OccupancyGrid,
    interior_budget: f64,
) -> Result<RenderedView> {
    match strategy {
        RenderStrategy::SrAd => sphere_trace_view(field, cam, grid),
        _ => {
            let mode = match strategy {
                RenderStrategy::VrDfd => GradMode::Dfd,
                RenderStrategy::VrAd => GradMode::Analytic,
                RenderStrategy::VrFd => GradMode::AxisFd { epsilon: step },
                RenderStrategy::SrAd => unreachable!(),
            };
            volume_render_view(field, cam, mode, step, sharpness, grid, interior_budget)
        }
    }
}

fn tile_centers(extent: u32, p: u32) -> Vec<u32> {
    let r = p / 2;
    let mut out = Vec::new();
    let mut c = r;
    loop {
        if c + r >= extent {
            // Last tile clamps to the image edge (may overlap its neighbor).
            out.push(extent - 1 - r);
            break;
        }
        out.push(c);
        if c + r == extent - 1 {
            break;
        }
        c += p;
    }
    out.dedup();
    out
}

fn volume_render_view<F: DifferentiableSdf>(
    field: &F,
    cam: &Camera,
    mode: GradMode,
    step: f64,
    sharpness: f64,
    grid: &OccupancyGrid,
    interior_budget: f64,
) -> Result<RenderedView> {
    const P: usize = 3;
    let mut normals = ImageF32::new(cam.width, cam.height, 3);
    let mut opacity = ImageF32::new(cam.width, cam.height, 1);
    let mut validity = ImageF32::new(cam.width, cam.height, 1);
    validity.data.fill(1.0);
    let mut counter = EvalCounter::default();

    let centers_x = tile_centers(cam.width, P as u32);
    let centers_y = tile_centers(cam.height, P as u32);
    let tiles: Vec<(u32, u32)> = centers_y
        .iter()
        .flat_map(|&cy| centers_x.iter().map(move |&cx| (cx, cy)))
        .collect();

    // Build one synthetic "patch batch" per row of tiles to bound memory.
    for row in tiles.chunks(centers_x.len()) {
        let mut set = PatchSampleSet {
            patch_size: P,
            positions: Vec::new(),
            t_grid: Vec::new(),
            t_center: Vec::new(),
            patch_index: Vec::new(),
            patch_ranges: Vec::new(),
            patches: Vec::new(),
            nominal_step: step,
        };
        for (pi, &(cx, cy)) in row.iter().enumerate() {
            let mut rays = Vec::with_capacity(P * P);
            let mut bases = Vec::with_capacity(P * P);
            for dy in 0..P as u32 {
                for dx in 0..P as u32 {
                    let px = (cx + dx - 1, cy + dy - 1);
                    let ray = pixel_ray(cam, px, (0.5, 0.5))?;
                    bases.push(direction_basis(cam, &ray)?);
                    rays.push(ray);
                }
            }
            let center_slot = P * P / 2;
            let center_ray = rays[center_slot];
            let m = bases[center_slot].marching_plane_normal;
            let ts = march_center_ray(&center_ray, grid, step, 0.5, interior_budget);
            let start = set.t_center.len();
            for &t in &ts {
                let tj = plane_extend(t, &center_ray.direction, &m, &rays)?;
                for (ray, &tv) in rays.iter().zip(tj.iter()) {
                    set.positions.push(ray.at(tv));
                    set.t_grid.push(tv);
                }
                set.t_center.push(t);
                set.patch_index.push(pi as u32);
            }
            set.patch_ranges.push(start..set.t_center.len());
            set.patches.push(crate::sampling::PatchInfo {
                view: 0,
                center_px: (cx, cy),
                rays,
                bases,
                normals: vec![Vec3::zeros(); P * P],
                mask: vec![0.0; P * P],
            });
        }
        if set.positions.is_empty() {
            continue;
        }
        let batch = render_patches(field, &set, mode, sharpness)?;
        counter.merge(&batch.counter);
        for (pi, patch) in batch.patches.iter().enumerate() {
            let (cx, cy) = set.patches[pi].center_px;
            for dy in 0..P as u32 {
                for dx in 0..P as u32 {
                    let slot = (dy as usize) * P + dx as usize;
                    let (x, y) = (cx + dx - 1, cy + dy - 1);
                    let n = patch.normal_hat[slot];
                    normals.set3(x, y, [n.x as f32, n.y as f32, n.z as f32]);
                    opacity.set(x, y, 0, patch.opacity_hat[slot] as f32);
                }
            }
        }
    }
    Ok(RenderedView {
        normals,
        opacity,
        validity,
        counter,
    })
}

const SPHERE_TRACE_TOL: f64 = 1e-4;
const SPHERE_TRACE_MAX_ITERS: usize = 256;

fn sphere_trace_view<F: DifferentiableSdf>(
    field: &F,
    cam: &Camera,
    grid: &OccupancyGrid,
) -> Result<RenderedView> {
    let mut normals = ImageF32::new(cam.width, cam.height, 3);
    let mut opacity = ImageF32::new(cam.width, cam.height, 1);
    let mut validity = ImageF32::new(cam.width, cam.height, 1);
    validity.data.fill(1.0);
    let mut counter = EvalCounter::default();

    struct Active {
        pixel: (u32, u32),
        ray: crate::geometry::Ray,
        t: f64,
        t_end: f64,
    }
    let bound = grid.bound_radius * 0.99;
    let mut active: Vec<Active> = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = pixel_ray(cam, (x, y), (0.5, 0.5))?;
            let b = ray.origin.dot(&ray.direction);
            let c = ray.origin.dot(&ray.origin) - bound * bound;
            let disc = b * b - c;
            if disc <= 0.0 {
                continue;
            }
            let (t0, t1) = (-b - disc.sqrt(), -b + disc.sqrt());
            if t1 <= 0.0 {
                continue;
            }
            active.push(Active {
                pixel: (x, y),
                ray,
                t: t0.max(1e-6),
                t_end: t1,
            });
        }
    }

    let mut hits: Vec<(u32, u32, Vec3)> = Vec::new();
    let mut iters = 0;
    while !active.is_empty() && iters < SPHERE_TRACE_MAX_ITERS {
        iters += 1;
        let positions: Vec<Vec3> = active.iter().map(|a| a.ray.at(a.t)).collect();
        let values = field.values(&positions)?;
        counter.rendering += values.len() as u64;
        let mut next = Vec::with_capacity(active.len());
        for (a, (&f, pos)) in active.into_iter().zip(values.iter().zip(positions.iter())) {
            if f.abs() < SPHERE_TRACE_TOL {
                hits.push((a.pixel.0, a.pixel.1, *pos));
                continue;
            }
            let t = a.t + f * 0.9;
            if t > a.t_end {
                // Marched out the far side: background.
                continue;
            }
            if t < 0.0 {
                validity.set(a.pixel.0, a.pixel.1, 0, 0.0);
                continue;
            }
            next.push(Active { t, ..a });
        }
        active = next;
    }
    for a in &active {
        validity.set(a.pixel.0, a.pixel.1, 0, 0.0);
    }

    let hit_positions: Vec<Vec3> = hits.iter().map(|h| h.2).collect();
    let (_, grads) = field.values_and_gradients(&hit_positions)?;
    counter.rendering += hit_positions.len() as u64;
    for ((x, y, _), g) in hits.iter().zip(grads.iter()) {
        let n = g.normalize();
        normals.set3(*x, *y, [n.x as f32, n.y as f32, n.z as f32]);
        opacity.set(*x, *y, 0, 1.0);
    }
    Ok(RenderedView {
        normals,
        opacity,
        validity,
        counter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AnalyticSdf;
    use crate::geometry::AxisConvention;
    use crate::sampling::{update_occupancy, PatchInfo};
    use crate::Mat3;

    #[test]
    fn alpha_zero_numerator() {
        assert_eq!(sdf_to_alpha(0.3, 0.3, 20.0), 0.0);
    }

    #[test]
    fn alpha_saturates_on_sharp_crossing() {
        let a = sdf_to_alpha(0.05, -0.05, 1e6);
        assert!((a - 1.0).abs() < 1e-12);
        // Extreme sharpness with underflowing phi still resolves by sign.
        assert_eq!(sdf_to_alpha(-20.0, -21.0, 1e3), 0.0);
        assert_eq!(sdf_to_alpha(20.0, -20.0, 1e3), 1.0);
    }

    #[test]
    fn alpha_matches_hand_computation() {
        // phi(2) = 0.880797, phi(-2) = 0.119203.
        let a = sdf_to_alpha(0.1, -0.1, 20.0);
        assert!((a - 0.86467).abs() < 1e-5, "alpha = {a}");
    }

    #[test]
    fn alpha_gradients_match_finite_differences() {
        let h = 1e-7;
        for (fi, fn_, s) in [(0.1, -0.1, 20.0), (0.02, 0.01, 55.0), (-0.01, -0.04, 35.0)] {
            let (_, dfi, dfn, ds) = sdf_to_alpha_grad(fi, fn_, s);
            let fd_fi = (sdf_to_alpha(fi + h, fn_, s) - sdf_to_alpha(fi - h, fn_, s)) / (2.0 * h);
            let fd_fn = (sdf_to_alpha(fi, fn_ + h, s) - sdf_to_alpha(fi, fn_ - h, s)) / (2.0 * h);
            let fd_s = (sdf_to_alpha(fi, fn_, s + h) - sdf_to_alpha(fi, fn_, s - h)) / (2.0 * h);
            assert!((dfi - fd_fi).abs() < 1e-5 * dfi.abs().max(1.0));
            assert!((dfn - fd_fn).abs() < 1e-5 * dfn.abs().max(1.0));
            assert!((ds - fd_s).abs() < 1e-5 * ds.abs().max(1.0));
        }
    }

    #[test]
    fn composite_single_opaque_sample() {
        let g = Vec3::new(0.0, 0.6, -0.8);
        let (n, o, w) = composite(&[1.0], &[g]);
        assert_eq!(n, g);
        assert_eq!(o, 1.0);
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn composite_all_transparent() {
        let (n, o, w) = composite(&[0.0, 0.0, 0.0], &[Vec3::x(); 3]);
        assert_eq!(n, Vec3::zeros());
        assert_eq!(o, 0.0);
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn composite_half_half() {
        let (_, o, w) = composite(&[0.5, 0.5], &[Vec3::x(), Vec3::y()]);
        assert_eq!(w, vec![0.5, 0.25]);
        assert!((o - 0.75).abs() < 1e-15);
    }

    #[test]
    fn composite_occlusion_zeroes_later_weights() {
        let alphas = [0.3, 1.0, 0.7, 0.2];
        let (_, o, w) = composite(&alphas, &[Vec3::x(); 4]);
        assert!(w[2] == 0.0 && w[3] == 0.0);
        assert!((o - 1.0).abs() < 1e-15);
        // Transmittance is non-increasing and opacity bounded.
        let mut t = 1.0;
        for (a, wi) in alphas.iter().zip(w.iter()) {
            let t_next = t - wi;
            assert!(t_next <= t && t_next >= 0.0);
            assert!(*wi <= t);
            let _ = a;
            t = t_next;
        }
    }

    #[test]
    fn composite_opacity_never_exceeds_one() {
        let alphas = vec![0.9999999; 64];
        let grads = vec![Vec3::x(); 64];
        let (_, o, w) = composite(&alphas, &grads);
        assert!(o <= 1.0 && o >= 0.0);
        assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn weight_concentrates_at_zero_crossing_for_sharp_s() {
        // Linear SDF along the ray crossing zero between samples 9 and 10.
        let values: Vec<f64> = (0..20).map(|i| 0.5 - 0.052 * i as f64).collect();
        let s = 1e4;
        let alphas: Vec<f64> = (0..19)
            .map(|i| sdf_to_alpha(values[i], values[i + 1], s))
            .collect();
        let grads = vec![Vec3::x(); 19];
        let (_, _, w) = composite(&alphas, &grads);
        let argmax = w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // Crossing interval: value goes negative at i=10, so alpha_9 spans it.
        assert_eq!(argmax, 9);
    }

    /// A single 3x3 patch looking at the origin from -z, fine marching steps.
    fn center_patch(step: f64, t0: f64, count: usize) -> crate::sampling::PatchSampleSet {
        use crate::geometry::{direction_basis, pixel_ray, Camera};
        // Narrow pixels keep the one-sided patch-edge differences accurate:
        // their first-order error is ~ pixel pitch x surface curvature.
        let res = 65u32;
        let cam = Camera::new(
            360.0,
            360.0,
            32.5,
            32.5,
            res,
            res,
            Mat3::identity(),
            Vec3::new(0.0, 0.0, -2.0),
            AxisConvention::YDown,
        )
        .unwrap();
        let p = 3usize;
        let area = 9;
        let mut rays = Vec::new();
        let mut bases = Vec::new();
        for dy in 0..3u32 {
            for dx in 0..3u32 {
                let ray = pixel_ray(&cam, (31 + dx, 31 + dy), (0.5, 0.5)).unwrap();
                bases.push(direction_basis(&cam, &ray).unwrap());
                rays.push(ray);
            }
        }
        let center_ray = rays[4];
        let m = bases[4].marching_plane_normal;
        let mut set = crate::sampling::PatchSampleSet {
            patch_size: p,
            positions: Vec::new(),
            t_grid: Vec::new(),
            t_center: Vec::new(),
            patch_index: Vec::new(),
            patch_ranges: Vec::new(),
            patches: Vec::new(),
            nominal_step: step,
        };
        for k in 0..count {
            let t = t0 + k as f64 * step;
            let tj = plane_extend(t, &center_ray.direction, &m, &rays).unwrap();
            for (ray, &tv) in rays.iter().zip(tj.iter()) {
                set.positions.push(ray.at(tv));
                set.t_grid.push(tv);
            }
            set.t_center.push(t);
            set.patch_index.push(0);
        }
        set.patch_ranges.push(0..count);
        set.patches.push(PatchInfo {
            view: 0,
            center_px: (32, 32),
            rays,
            bases,
            normals: vec![Vec3::zeros(); area],
            mask: vec![1.0; area],
        });
        set
    }

    #[test]
    fn rendered_normal_matches_sphere_at_crossing() {
        let sphere = AnalyticSdf::sphere(Vec3::zeros(), 0.5);
        let set = center_patch(5e-4, 1.30, 800);
        for mode in [GradMode::Dfd, GradMode::Analytic] {
            let batch = render_patches(&sphere, &set, mode, 2000.0).unwrap();
            let patch = &batch.patches[0];
            for slot in 0..9 {
                let n = patch.normal_hat[slot].normalize();
                // Expected: sphere normal at the first crossing of that ray.
                let ray = &set.patches[0].rays[slot];
                let b = ray.origin.dot(&ray.direction);
                let c = ray.origin.norm_squared() - 0.25;
                let t_hit = -b - (b * b - c).sqrt();
                let expect = ray.at(t_hit).normalize();
                let angle = n.dot(&expect).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(angle < 1.0, "mode {mode:?} slot {slot}: {angle} deg");
                assert!(patch.opacity_hat[slot] > 0.99);
            }
        }
    }

    #[test]
    fn dfd_and_analytic_render_agree_on_smooth_field() {
        let sphere = AnalyticSdf::sphere(Vec3::zeros(), 0.5);
        let set = center_patch(1e-3, 1.30, 400);
        let a = render_patches(&sphere, &set, GradMode::Dfd, 500.0).unwrap();
        let b = render_patches(&sphere, &set, GradMode::Analytic, 500.0).unwrap();
        let mut total_angle = 0.0;
        for slot in 0..9 {
            let na = a.patches[0].normal_hat[slot].normalize();
            let nb = b.patches[0].normal_hat[slot].normalize();
            total_angle += na.dot(&nb).clamp(-1.0, 1.0).acos().to_degrees();
        }
        assert!(total_angle / 9.0 < 1.0);
    }

    #[test]
    fn empty_sample_set_renders_empty() {
        let sphere = AnalyticSdf::sphere(Vec3::zeros(), 0.5);
        let set = crate::sampling::PatchSampleSet {
            patch_size: 3,
            positions: Vec::new(),
            t_grid: Vec::new(),
            t_center: Vec::new(),
            patch_index: Vec::new(),
            patch_ranges: Vec::new(),
            patches: Vec::new(),
            nominal_step: 0.01,
        };
        let batch = render_patches(&sphere, &set, GradMode::Dfd, 100.0).unwrap();
        assert!(batch.patches.is_empty());
        assert_eq!(batch.counter.forward_sdf_evals(), 0);
    }

    fn test_camera(res: u32) -> Camera {
        let eye = Vec3::new(0.0, -2.4, 0.6);
        let fwd = (-eye).normalize();
        let up = Vec3::z();
        let xc = fwd.cross(&up).normalize();
        let yc = fwd.cross(&xc);
        Camera::new(
            res as f64 * 1.8,
            res as f64 * 1.8,
            res as f64 / 2.0,
            res as f64 / 2.0,
            res,
            res,
            Mat3::from_columns(&[xc, yc, fwd]),
            eye,
            AxisConvention::YDown,
        )
        .unwrap()
    }

    #[test]
    fn full_view_strategies_match_geometry_on_sphere() {
        let sphere = AnalyticSdf::sphere(Vec3::zeros(), 0.5);
        let cam = test_camera(96);
        let mut grid = OccupancyGrid::new(64, 1.0);
        update_occupancy(&mut grid, &sphere);

        let sr =
            render_full_view(&sphere, &cam, RenderStrategy::SrAd, 1e-3, 2000.0, &grid, 0.01)
                .unwrap();
        let vr =
            render_full_view(&sphere, &cam, RenderStrategy::VrDfd, 1e-3, 2000.0, &grid, 0.01)
                .unwrap();

        // Project a known surface point to find solid foreground pixels.
        let mut checked_sr = 0;
        let mut checked_vr = 0;
        let mut vr_angle_sum = 0.0;
        for y in 0..96 {
            for x in 0..96 {
                let o = sr.opacity.get(x, y, 0);
                if o < 0.5 {
                    continue;
                }
                let ray = pixel_ray(&cam, (x, y), (0.5, 0.5)).unwrap();
                let b = ray.origin.dot(&ray.direction);
                let c = ray.origin.norm_squared() - 0.25;
                let disc = b * b - c;
                if disc < 0.01 {
                    continue; // grazing silhouette
                }
                let expect = ray.at(-b - disc.sqrt()).normalize();
                let n = sr.normals.get3(x, y);
                let n = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64).normalize();
                let angle = n.dot(&expect).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(angle < 0.1, "sr pixel ({x},{y}): {angle} deg");
                checked_sr += 1;

                if vr.opacity.get(x, y, 0) > 0.99 {
                    let n = vr.normals.get3(x, y);
                    let n = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64).normalize();
                    let angle = n.dot(&expect).clamp(-1.0, 1.0).acos().to_degrees();
                    // Patch-edge pixels use one-sided differences whose error
                    // is ~ pixel pitch x curvature at this resolution.
                    assert!(angle < 2.5, "vr pixel ({x},{y}): {angle} deg");
                    vr_angle_sum += angle;
                    checked_vr += 1;
                }
            }
        }
        assert!(checked_sr > 500, "only {checked_sr} pixels checked");
        assert!(checked_vr > 500);
        let vr_mean = vr_angle_sum / checked_vr as f64;
        assert!(vr_mean < 1.0, "vr mean angle {vr_mean}");
        // Opacity in bounds everywhere.
        for &o in &vr.opacity.data {
            assert!((0.0..=1.0).contains(&(o as f64)));
        }
    }

    #[test]
    fn tile_centers_cover_all_pixels() {
        for extent in [6u32, 7, 9, 10, 48, 127] {
            let centers = tile_centers(extent, 3);
            let mut covered = vec![false; extent as usize];
            for &c in &centers {
                for d in -1i64..=1 {
                    covered[(c as i64 + d) as usize] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "extent {extent}");
        }
    }

    #[test]
    fn patch_parallel_matches_sequential_reference_bitwise() {
        let sphere = AnalyticSdf::sphere(Vec3::zeros(), 0.5);
        let set = center_patch(5e-3, 1.30, 120);
        let sharp = 150.0;
        let batch = render_patches(&sphere, &set, GradMode::Dfd, sharp).unwrap();
        // Scalar reference: per ray, sequential alphas and compositing from
        // the same values and gradients.
        let area = set.patch_area();
        for (pi, range) in set.patch_ranges.iter().enumerate() {
            for slot in 0..area {
                let mut t = 1.0f64;
                let mut normal = Vec3::zeros();
                let mut opacity = 0.0f64;
                for s in range.clone() {
                    let i = set.point(s, slot);
                    let a = if s + 1 < range.end {
                        let j = set.point(s + 1, slot);
                        sdf_to_alpha(batch.values[i], batch.values[j], sharp)
                    } else {
                        0.0
                    };
                    let w = t * a;
                    assert_eq!(w.to_bits(), batch.weights[i].to_bits());
                    let g = if batch.grad_valid[i] { batch.gradients[i] } else { Vec3::zeros() };
                    normal += w * g;
                    opacity += w;
                    t -= w;
                }
                let r = &batch.patches[pi];
                assert_eq!(normal.x.to_bits(), r.normal_hat[slot].x.to_bits());
                assert_eq!(normal.y.to_bits(), r.normal_hat[slot].y.to_bits());
                assert_eq!(normal.z.to_bits(), r.normal_hat[slot].z.to_bits());
                assert_eq!(opacity.min(1.0).to_bits(), r.opacity_hat[slot].to_bits());
            }
        }
    }

    #[test]
    fn backprop_weights_matches_fd_through_compositing() {
        // Check dL/df through alpha+compositing for L = sum w_i c_i.
        let sphere = AnalyticSdf::sphere(Vec3::zeros(), 0.5);
        let set = center_patch(0.02, 1.30, 30);
        let sharp = 60.0;
        let coeffs: Vec<f64> = (0..set.n_points()).map(|i| ((i * 37) % 11) as f64 / 7.0).collect();
        let loss = |vals: &[f64]| -> f64 {
            // Recomposite from values.
            let area = 9;
            let mut total = 0.0;
            for range in &set.patch_ranges {
                for slot in 0..area {
                    let mut t = 1.0;
                    for s in range.clone() {
                        let i = set.point(s, slot);
                        let a = if s + 1 < range.end {
                            let j = set.point(s + 1, slot);
                            sdf_to_alpha(vals[i], vals[j], sharp)
                        } else {
                            0.0
                        };
                        let w = t * a;
                        total += w * coeffs[i];
                        t -= w;
                    }
                }
            }
            total
        };
        let batch = render_patches(&sphere, &set, GradMode::Dfd, sharp).unwrap();
        let adj = backprop_weights_to_values(&set, &batch, &coeffs);
        let mut values = batch.values.clone();
        let h = 1e-6;
        for i in (0..values.len()).step_by(17) {
            let orig = values[i];
            values[i] = orig + h;
            let up = loss(&values);
            values[i] = orig - h;
            let dn = loss(&values);
            values[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - adj.value_adj[i]).abs() < 1e-5 * fd.abs().max(1e-3),
                "i={i}: fd {fd} vs adj {}",
                adj.value_adj[i]
            );
        }
    }
}
