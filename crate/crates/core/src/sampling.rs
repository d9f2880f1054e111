//! Occupancy-grid accelerated, patch-based ray marching.
//!
//! The center ray of each pixel patch is marched through occupied cells at
//! the scheduled step; every marching position defines a plane parallel to
//! the image plane, and the remaining rays of the patch are sampled exactly
//! where they pierce that plane. Neighboring samples therefore line up for
//! directional finite differencing at zero extra cost.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::geometry::{pixel_ray, DirectionBasis, Ray, ViewBases};
use crate::scene::NormalView;
use crate::Vec3;

/// Fraction of the bound radius rays are clipped to, so finite-difference
/// stencils and patch-neighbor samples stay inside the bound cube.
const MARCH_RADIUS_FRACTION: f64 = 0.98;

#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub resolution: u32,
    pub bound_radius: f64,
    /// Sigmoid steepness k in the cell classification.
    pub steepness: f64,
    /// Occupancy threshold tau_o.
    pub threshold: f64,
    /// Use the literal printed inequality instead of the corrected band
    /// (kept for comparison; the literal form marks far-outside cells).
    pub literal_formula: bool,
    occupied: Vec<u64>,
    interior: Vec<u64>,
}

impl OccupancyGrid {
    pub fn new(resolution: u32, bound_radius: f64) -> Self {
        let words = ((resolution as usize).pow(3) + 63) / 64;
        OccupancyGrid {
            resolution,
            bound_radius,
            steepness: 80.0,
            threshold: 0.1,
            literal_formula: false,
            occupied: vec![0; words],
            interior: vec![0; words],
        }
    }

    /// Half-width of the occupied band in SDF units: cells with |f| below
    /// this (or any f < 0) are kept.
    pub fn band(&self) -> f64 {
        ((1.0 - self.threshold) / self.threshold).ln() / self.steepness
    }

    #[inline]
    pub fn cell_size(&self) -> f64 {
        2.0 * self.bound_radius / self.resolution as f64
    }

    #[inline]
    fn bit_index(&self, ix: u32, iy: u32, iz: u32) -> usize {
        ((ix as usize * self.resolution as usize) + iy as usize) * self.resolution as usize
            + iz as usize
    }

    #[inline]
    pub fn occupied(&self, ix: u32, iy: u32, iz: u32) -> bool {
        let b = self.bit_index(ix, iy, iz);
        self.occupied[b >> 6] >> (b & 63) & 1 == 1
    }

    #[inline]
    pub fn interior(&self, ix: u32, iy: u32, iz: u32) -> bool {
        let b = self.bit_index(ix, iy, iz);
        self.interior[b >> 6] >> (b & 63) & 1 == 1
    }

    pub fn set_occupied(&mut self, ix: u32, iy: u32, iz: u32, value: bool) {
        let b = self.bit_index(ix, iy, iz);
        if value {
            self.occupied[b >> 6] |= 1 << (b & 63);
        } else {
            self.occupied[b >> 6] &= !(1 << (b & 63));
        }
    }

    pub fn fill_occupied(&mut self, value: bool) {
        let w = if value { !0u64 } else { 0 };
        self.occupied.fill(w);
        if !value {
            self.interior.fill(0);
        }
    }

    pub fn cell_center(&self, ix: u32, iy: u32, iz: u32) -> Vec3 {
        let cs = self.cell_size();
        let b = self.bound_radius;
        Vec3::new(
            -b + (ix as f64 + 0.5) * cs,
            -b + (iy as f64 + 0.5) * cs,
            -b + (iz as f64 + 0.5) * cs,
        )
    }

    pub fn occupied_cell_count(&self) -> usize {
        self.occupied.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// RLE bitset dump for offline inspection: header line, then
    /// `count value` run pairs over the flattened x-major cell order.
    pub fn dump_rle(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "occupancy-rle v1 res={} bound={}", self.resolution, self.bound_radius)
            .map_err(|e| Error::io(path, e))?;
        let n = (self.resolution as usize).pow(3);
        let mut run_val = self.occupied[0] & 1;
        let mut run_len = 0usize;
        for b in 0..n {
            let v = self.occupied[b >> 6] >> (b & 63) & 1;
            if v == run_val {
                run_len += 1;
            } else {
                writeln!(w, "{run_len} {run_val}").map_err(|e| Error::io(path, e))?;
                run_val = v;
                run_len = 1;
            }
        }
        writeln!(w, "{run_len} {run_val}").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Re-classify every cell from the field value at its center. The corrected
/// rule keeps the band around the zero set plus everything inside; the
/// literal printed rule is available behind `literal_formula`.
pub fn update_occupancy<F: ScalarField>(grid: &mut OccupancyGrid, field: &F) {
    let res = grid.resolution;
    let band = grid.band();
    let k = grid.steepness;
    let tau = grid.threshold;
    let literal = grid.literal_formula;
    let cell_size = grid.cell_size();
    let bound = grid.bound_radius;

    let plane_words = ((res as usize).pow(2)).div_ceil(64) * 64 / 64;
    let _ = plane_words;
    let plane_cells = (res * res) as usize;
    // One x-slab per task; each writes a disjoint bit range only when the
    // slab is 64-cell aligned, so accumulate slabs locally and splice.
    let slabs: Vec<(Vec<bool>, Vec<bool>)> = (0..res)
        .into_par_iter()
        .map(|ix| {
            let mut occ = vec![false; plane_cells];
            let mut inte = vec![false; plane_cells];
            for iy in 0..res {
                for iz in 0..res {
                    let c = Vec3::new(
                        -bound + (ix as f64 + 0.5) * cell_size,
                        -bound + (iy as f64 + 0.5) * cell_size,
                        -bound + (iz as f64 + 0.5) * cell_size,
                    );
                    let f = field.value(&c);
                    let o = if literal {
                        1.0 / (1.0 + (k * f).exp()) < tau
                    } else {
                        f < band
                    };
                    let idx = (iy * res + iz) as usize;
                    occ[idx] = o;
                    inte[idx] = f < -band;
                }
            }
            (occ, inte)
        })
        .collect();

    for (ix, (occ, inte)) in slabs.iter().enumerate() {
        for idx in 0..plane_cells {
            let b = ix * plane_cells + idx;
            let (w, s) = (b >> 6, b & 63);
            if occ[idx] {
                grid.occupied[w] |= 1 << s;
            } else {
                grid.occupied[w] &= !(1 << s);
            }
            if inte[idx] {
                grid.interior[w] |= 1 << s;
            } else {
                grid.interior[w] &= !(1 << s);
            }
        }
    }
}

/// Re-classify only cells near the currently occupied set (dilated by
/// `dilation` cells in Chebyshev distance); everything else keeps occ = 0.
/// Between full sweeps the zero set cannot outrun the dilation radius, so
/// the result matches `update_occupancy` while evaluating ~2 orders of
/// magnitude fewer cells.
pub fn update_occupancy_incremental<F: ScalarField>(
    grid: &mut OccupancyGrid,
    field: &F,
    dilation: u32,
) {
    let res = grid.resolution as usize;
    if res % 64 != 0 {
        // Sub-word row alignment not supported; fall back to the full sweep.
        update_occupancy(grid, field);
        return;
    }
    let words_z = res / 64;
    let words_y = words_z * res;
    let mut candidates = grid.occupied.clone();

    // Separable Chebyshev dilation: z within rows (sub-word shifts with
    // carries), then y and x as whole-word ORs at row strides.
    for _ in 0..dilation {
        let src = candidates.clone();
        for (i, w) in candidates.iter_mut().enumerate() {
            let lo = if i % words_z > 0 { src[i - 1] } else { 0 };
            let hi = if i % words_z + 1 < words_z { src[i + 1] } else { 0 };
            *w |= src[i] << 1 | src[i] >> 1 | lo >> 63 | hi << 63;
        }
    }
    for (stride, axis_len) in [(words_z, res), (words_y, res)] {
        for _ in 0..dilation {
            let src = candidates.clone();
            let per_axis = stride * axis_len;
            for (i, w) in candidates.iter_mut().enumerate() {
                let pos = i % per_axis;
                if pos >= stride {
                    *w |= src[i - stride];
                }
                if pos + stride < per_axis {
                    *w |= src[i + stride];
                }
            }
        }
    }

    let band = grid.band();
    let k = grid.steepness;
    let tau = grid.threshold;
    let literal = grid.literal_formula;
    let cell_size = grid.cell_size();
    let bound = grid.bound_radius;
    let resolution = grid.resolution;

    let updates: Vec<(usize, u64, u64)> = candidates
        .par_iter()
        .enumerate()
        .filter(|(_, w)| **w != 0)
        .map(|(wi, &w)| {
            let mut occ_word = 0u64;
            let mut int_word = 0u64;
            for bit in 0..64u64 {
                if w >> bit & 1 == 0 {
                    continue;
                }
                let cell = wi as u64 * 64 + bit;
                let iz = cell % resolution as u64;
                let iy = cell / resolution as u64 % resolution as u64;
                let ix = cell / (resolution as u64 * resolution as u64);
                let c = Vec3::new(
                    -bound + (ix as f64 + 0.5) * cell_size,
                    -bound + (iy as f64 + 0.5) * cell_size,
                    -bound + (iz as f64 + 0.5) * cell_size,
                );
                let f = field.value(&c);
                let o = if literal {
                    1.0 / (1.0 + (k * f).exp()) < tau
                } else {
                    f < band
                };
                if o {
                    occ_word |= 1 << bit;
                }
                if f < -band {
                    int_word |= 1 << bit;
                }
            }
            (wi, occ_word, int_word)
        })
        .collect();
    for (wi, occ_word, int_word) in updates {
        let keep = !candidates[wi];
        grid.occupied[wi] = grid.occupied[wi] & keep | occ_word;
        grid.interior[wi] = grid.interior[wi] & keep | int_word;
    }
}

/// Coarse-to-fine marching step: log-linear from `step_start` to `step_end`.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedule {
    pub step_start: f64,
    pub step_end: f64,
    pub total_batches: usize,
}

impl StepSchedule {
    pub fn new(step_start: f64, step_end: f64, total_batches: usize) -> Self {
        StepSchedule {
            step_start,
            step_end,
            total_batches,
        }
    }

    pub fn step(&self, batch: usize) -> f64 {
        let t = (batch as f64 / self.total_batches.max(1) as f64).clamp(0.0, 1.0);
        (self.step_start.ln() * (1.0 - t) + self.step_end.ln() * t).exp()
    }
}

fn ray_sphere(ray: &Ray, radius: f64) -> Option<(f64, f64)> {
    let b = ray.origin.dot(&ray.direction);
    let c = ray.origin.dot(&ray.origin) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = (-b - sq, -b + sq);
    if t1 <= 0.0 {
        return None;
    }
    Some((t0.max(1e-6), t1))
}

/// March a ray through the occupied cells of `grid` at spacing `step`.
///
/// `jitter` in [0,1) shifts the global sample phase (0.5 = cell-centered);
/// `interior_budget` bounds the distance travelled through interior cells
/// before the march stops — everything beyond a deep crossing is occluded.
pub fn march_center_ray(
    ray: &Ray,
    grid: &OccupancyGrid,
    step: f64,
    jitter: f64,
    interior_budget: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    let Some((t0, t1)) = ray_sphere(ray, grid.bound_radius * MARCH_RADIUS_FRACTION) else {
        return out;
    };
    let res = grid.resolution as i64;
    let cell = grid.cell_size();
    let bound = grid.bound_radius;

    let start = ray.at(t0 + 1e-9);
    let mut ic = [0i64; 3];
    for k in 0..3 {
        ic[k] = (((start[k] + bound) / cell).floor() as i64).clamp(0, res - 1);
    }
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut istep = [0i64; 3];
    for k in 0..3 {
        let d = ray.direction[k];
        if d > 1e-15 {
            istep[k] = 1;
            t_delta[k] = cell / d;
            let next_boundary = -bound + (ic[k] + 1) as f64 * cell;
            t_max[k] = t0 + (next_boundary - start[k]) / d;
        } else if d < -1e-15 {
            istep[k] = -1;
            t_delta[k] = -cell / d;
            let boundary = -bound + ic[k] as f64 * cell;
            t_max[k] = t0 + (boundary - start[k]) / d;
        }
    }

    let mut sample_t = t0 + jitter.clamp(0.0, 1.0 - 1e-12) * step;
    let mut t_cur = t0;
    let mut interior_used = 0.0;
    loop {
        let t_exit = t_max[0].min(t_max[1]).min(t_max[2]).min(t1);
        let (ix, iy, iz) = (ic[0] as u32, ic[1] as u32, ic[2] as u32);
        if grid.occupied(ix, iy, iz) {
            while sample_t < t_exit {
                out.push(sample_t);
                sample_t += step;
            }
            if grid.interior(ix, iy, iz) {
                interior_used += t_exit - t_cur;
                if interior_used > interior_budget {
                    break;
                }
            }
        } else if sample_t < t_exit {
            // Keep the global phase without iterating the gap.
            let skips = ((t_exit - sample_t) / step).ceil();
            sample_t += skips * step;
        }
        if t_exit >= t1 {
            break;
        }
        t_cur = t_exit;
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        ic[axis] += istep[axis];
        if ic[axis] < 0 || ic[axis] >= res {
            break;
        }
        t_max[axis] += t_delta[axis];
    }
    out
}

/// Place the marching plane through `t_center` on the center ray and return
/// the distance along every patch ray to that plane.
pub fn plane_extend(
    t_center: f64,
    center_dir: &Vec3,
    plane_normal: &Vec3,
    rays: &[Ray],
) -> Result<Vec<f64>> {
    let num = t_center * center_dir.dot(plane_normal);
    let mut out = Vec::with_capacity(rays.len());
    for ray in rays {
        let denom = ray.direction.dot(plane_normal);
        if denom <= 1e-8 {
            return Err(Error::internal(format!(
                "patch ray nearly parallel to the marching plane (v.m = {denom:.3e})"
            )));
        }
        out.push(num / denom);
    }
    Ok(out)
}

/// One drawn patch: its camera geometry, per-pixel bases and supervision.
#[derive(Debug, Clone)]
pub struct PatchInfo {
    pub view: u32,
    pub center_px: (u32, u32),
    pub rays: Vec<Ray>,
    pub bases: Vec<DirectionBasis>,
    /// World-space normal labels per pixel.
    pub normals: Vec<Vec3>,
    /// Mask labels per pixel.
    pub mask: Vec<f32>,
}

/// All rendered samples of one batch of patches, patch-major and marching-
/// plane-major: sample `s` holds `patch_area` positions, one per pixel, all
/// on the same marching plane.
#[derive(Debug, Clone)]
pub struct PatchSampleSet {
    pub patch_size: usize,
    pub positions: Vec<Vec3>,
    pub t_grid: Vec<f64>,
    pub t_center: Vec<f64>,
    pub patch_index: Vec<u32>,
    pub patch_ranges: Vec<std::ops::Range<usize>>,
    pub patches: Vec<PatchInfo>,
    pub nominal_step: f64,
}

impl PatchSampleSet {
    #[inline]
    pub fn patch_area(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn n_samples(&self) -> usize {
        self.t_center.len()
    }

    pub fn n_points(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn point(&self, sample: usize, slot: usize) -> usize {
        sample * self.patch_area() + slot
    }

    /// Largest deviation of any sample point from its marching plane.
    pub fn max_coplanarity_error(&self) -> f64 {
        let area = self.patch_area();
        let center = area / 2;
        let mut worst = 0.0f64;
        for s in 0..self.n_samples() {
            let patch = &self.patches[self.patch_index[s] as usize];
            let m = patch.bases[center].marching_plane_normal;
            let anchor = self.positions[self.point(s, center)];
            for slot in 0..area {
                let d = (self.positions[self.point(s, slot)] - anchor).dot(&m);
                worst = worst.max(d.abs());
            }
        }
        worst
    }
}

/// Per-scene sampling state: candidate center pixels per view plus the pool
/// size prefix for uniform drawing across views.
pub struct SamplerContext {
    pub candidates: Vec<Vec<(u32, u32)>>,
    prefix: Vec<u64>,
    pub skipped_views: Vec<u32>,
}

impl SamplerContext {
    pub fn build(views: &[NormalView], patch_radius: u32) -> Result<Self> {
        let mut candidates = Vec::with_capacity(views.len());
        let mut skipped = Vec::new();
        for (i, view) in views.iter().enumerate() {
            // A view with no foreground at all supervises nothing useful;
            // exclude it entirely (the caller reports the skip).
            let c = if view.foreground_count() == 0 {
                skipped.push(i as u32);
                Vec::new()
            } else {
                view.center_candidates(patch_radius)
            };
            candidates.push(c);
        }
        let mut prefix = Vec::with_capacity(views.len() + 1);
        let mut acc = 0u64;
        prefix.push(0);
        for c in &candidates {
            acc += c.len() as u64;
            prefix.push(acc);
        }
        if acc == 0 {
            return Err(Error::invalid("no view has any foreground patch center"));
        }
        Ok(SamplerContext {
            candidates,
            prefix,
            skipped_views: skipped,
        })
    }

    pub fn total(&self) -> u64 {
        *self.prefix.last().unwrap()
    }

    /// Per-pixel-uniform draw over all foreground centers of all views.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (u32, (u32, u32)) {
        let r = rng.random_range(0..self.total());
        let view = match self.prefix.binary_search(&r) {
            Ok(i) => {
                // r equals a prefix boundary: the draw belongs to the next
                // non-empty view.
                let mut v = i;
                while self.prefix[v + 1] == self.prefix[v] {
                    v += 1;
                }
                v
            }
            Err(i) => i - 1,
        };
        let local = (r - self.prefix[view]) as usize;
        (view as u32, self.candidates[view][local])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub n_patches: usize,
    pub patch_size: usize,
    pub jitter: bool,
    /// Distance allowed through interior cells before the march stops.
    pub interior_budget: f64,
}

/// Draw `n_patches` pixel patches and march them into a sample set with
/// per-pixel supervision labels attached.
pub fn sample_batch(
    views: &[NormalView],
    bases: &[ViewBases],
    ctx: &SamplerContext,
    grid: &OccupancyGrid,
    step: f64,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PatchSampleSet> {
    if views.is_empty() {
        return Err(Error::invalid("sample_batch needs at least one view"));
    }
    if cfg.patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let p = cfg.patch_size;
    let area = p * p;
    let radius = (p / 2) as i64;

    // Draw all patch definitions (and jitters) sequentially so the RNG
    // stream is independent of the parallel schedule below.
    struct Draw {
        view: u32,
        center: (u32, u32),
        jitter: f64,
    }
    let draws: Vec<Draw> = (0..cfg.n_patches)
        .map(|_| {
            let (view, center) = ctx.draw(rng);
            let jitter = if cfg.jitter { rng.random::<f64>() } else { 0.5 };
            Draw {
                view,
                center,
                jitter,
            }
        })
        .collect();

    struct Marched {
        info: PatchInfo,
        t_center: Vec<f64>,
        t_grid: Vec<f64>,
        positions: Vec<Vec3>,
    }
    let marched: Result<Vec<Marched>> = draws
        .par_iter()
        .map(|draw| {
            let view = &views[draw.view as usize];
            let vb = &bases[draw.view as usize];
            let (cx, cy) = draw.center;
            let mut rays = Vec::with_capacity(area);
            let mut pix_bases = Vec::with_capacity(area);
            let mut normals = Vec::with_capacity(area);
            let mut mask = Vec::with_capacity(area);
            for dy in -radius..=(p as i64 - 1 - radius) {
                for dx in -radius..=(p as i64 - 1 - radius) {
                    let x = (cx as i64 + dx) as u32;
                    let y = (cy as i64 + dy) as u32;
                    let ray = pixel_ray(&view.camera, (x, y), (0.5, 0.5))?;
                    let basis = vb.get(x, y).ok_or_else(|| {
                        Error::internal(format!("missing direction basis for pixel ({x},{y})"))
                    })?;
                    rays.push(ray);
                    pix_bases.push(basis.clone());
                    normals.push(view.normal_at(x, y));
                    mask.push(view.mask.get(x, y, 0));
                }
            }
            let center_slot = area / 2;
            let center_ray = rays[center_slot];
            let ts = march_center_ray(&center_ray, grid, step, draw.jitter, cfg.interior_budget);
            let m = pix_bases[center_slot].marching_plane_normal;
            let mut t_grid = Vec::with_capacity(ts.len() * area);
            let mut positions = Vec::with_capacity(ts.len() * area);
            for &t in &ts {
                let tj = plane_extend(t, &center_ray.direction, &m, &rays)?;
                for (ray, &tjj) in rays.iter().zip(tj.iter()) {
                    positions.push(ray.at(tjj));
                    t_grid.push(tjj);
                }
            }
            Ok(Marched {
                info: PatchInfo {
                    view: draw.view,
                    center_px: draw.center,
                    rays,
                    bases: pix_bases,
                    normals,
                    mask,
                },
                t_center: ts,
                t_grid,
                positions,
            })
        })
        .collect();
    let marched = marched?;

    let mut set = PatchSampleSet {
        patch_size: p,
        positions: Vec::new(),
        t_grid: Vec::new(),
        t_center: Vec::new(),
        patch_index: Vec::new(),
        patch_ranges: Vec::with_capacity(cfg.n_patches),
        patches: Vec::with_capacity(cfg.n_patches),
        nominal_step: step,
    };
    for (pi, m) in marched.into_iter().enumerate() {
        let start = set.t_center.len();
        set.t_center.extend_from_slice(&m.t_center);
        set.t_grid.extend_from_slice(&m.t_grid);
        set.positions.extend_from_slice(&m.positions);
        set.patch_index
            .extend(std::iter::repeat(pi as u32).take(m.t_center.len()));
        set.patch_ranges.push(start..set.t_center.len());
        set.patches.push(m.info);
    }
    Ok(set)
}
