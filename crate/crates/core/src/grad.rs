//! Spatial-gradient backends for the SDF: exact differentiation of the
//! network, axis-aligned central differences, and directional finite
//! differences (DFD) that reuse the volume-rendering samples.
//!
//! DFD differences the already-evaluated field values along three
//! non-coplanar directions per pixel — the viewing ray and the two image
//! axes realized by the shared marching planes — and maps them back through
//! the per-pixel inverse direction matrix. It therefore costs zero extra
//! field evaluations, where the axis-aligned stencil costs six per sample.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{AnalyticSdf, SdfField};
use crate::geometry::DirectionBasis;
use crate::sampling::PatchSampleSet;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradMode {
    Analytic,
    AxisFd { epsilon: f64 },
    Dfd,
}

/// CLI-facing backend selector; `to_mode` resolves the FD step at batch time
/// (defaulting to the current marching step).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradBackend {
    Analytic,
    AxisFd,
    Dfd,
}

impl GradBackend {
    pub fn to_mode(self, marching_step: f64) -> GradMode {
        match self {
            GradBackend::Analytic => GradMode::Analytic,
            GradBackend::AxisFd => GradMode::AxisFd {
                epsilon: marching_step,
            },
            GradBackend::Dfd => GradMode::Dfd,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GradBackend::Analytic => "ad",
            GradBackend::AxisFd => "fd",
            GradBackend::Dfd => "dfd",
        }
    }
}

impl std::str::FromStr for GradBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ad" | "analytic" => Ok(GradBackend::Analytic),
            "fd" | "axis-fd" => Ok(GradBackend::AxisFd),
            "dfd" => Ok(GradBackend::Dfd),
            other => Err(Error::invalid(format!(
                "unknown gradient mode '{other}' (expected dfd, fd or ad)"
            ))),
        }
    }
}

/// Purpose-tagged forward evaluation counts.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EvalCounter {
    /// Field evaluations at the volume-rendering samples themselves.
    pub rendering: u64,
    /// Additional evaluations performed only to estimate gradients.
    pub gradient_extra: u64,
}

impl EvalCounter {
    pub fn forward_sdf_evals(&self) -> u64 {
        self.rendering + self.gradient_extra
    }

    pub fn merge(&mut self, other: &EvalCounter) {
        self.rendering += other.rendering;
        self.gradient_extra += other.gradient_extra;
    }
}

/// Batched field evaluation interface shared by the learned field and the
/// analytic oracles, so rendering and gradient code can run against both.
pub trait DifferentiableSdf: Sync {
    fn values(&self, xs: &[Vec3]) -> Result<Vec<f64>>;
    fn values_and_gradients(&self, xs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)>;
    fn bound_radius(&self) -> f64;
}

impl DifferentiableSdf for SdfField {
    fn values(&self, xs: &[Vec3]) -> Result<Vec<f64>> {
        SdfField::values(self, xs)
    }
    fn values_and_gradients(&self, xs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        SdfField::values_and_gradients(self, xs)
    }
    fn bound_radius(&self) -> f64 {
        self.cfg().bound_radius
    }
}

impl DifferentiableSdf for AnalyticSdf {
    fn values(&self, xs: &[Vec3]) -> Result<Vec<f64>> {
        Ok(xs.par_iter().map(|x| self.value(x)).collect())
    }
    fn values_and_gradients(&self, xs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        let pairs: Vec<(f64, Vec3)> = xs
            .par_iter()
            .map(|x| (self.value(x), self.gradient(x)))
            .collect();
        Ok((
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        ))
    }
    fn bound_radius(&self) -> f64 {
        f64::INFINITY
    }
}

/// Axis-aligned central difference, six extra evaluations.
pub fn grad_axis_fd<F>(eval: F, x: &Vec3, epsilon: f64, counter: &mut EvalCounter) -> Result<Vec3>
where
    F: Fn(&Vec3) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Vec3::zeros();
    for k in 0..3 {
        let mut xp = *x;
        let mut xm = *x;
        xp[k] += epsilon;
        xm[k] -= epsilon;
        let fp = eval(&xp)?;
        let fm = eval(&xm)?;
        counter.gradient_extra += 2;
        g[k] = (fp - fm) / (2.0 * epsilon);
    }
    Ok(g)
}

/// Central difference of the field along a ray: (f+ - f-) / (2 dt).
pub fn directional_derivative_fd(f_plus: f64, f_minus: f64, dt: f64) -> Result<f64> {
    if dt <= 0.0 {
        return Err(Error::invalid("directional-difference step must be positive"));
    }
    Ok((f_plus - f_minus) / (2.0 * dt))
}

/// Solve V grad = dd for the spatial gradient; zero extra field evaluations.
pub fn grad_dfd(dd: &Vec3, basis: &DirectionBasis) -> Vec3 {
    basis.v_inv * dd
}

/// Per-point gradients of a sample set plus validity flags (points whose
/// stencil cannot be formed — single-sample rays, culled FD stencils — are
/// excluded from gradient losses).
#[derive(Debug, Clone)]
pub struct SpatialGradients {
    pub gradients: Vec<Vec3>,
    pub valid: Vec<bool>,
    pub counter: EvalCounter,
    /// Samples dropped because an FD stencil would leave the bound.
    pub culled: usize,
}

/// Directional finite differences over an evaluated sample set.
///
/// Along-ray differences use consecutive marching planes of the same pixel
/// (one-sided at ray ends, dividing by the true local spacing); across-patch
/// differences use the neighboring pixels on the same plane (one-sided at
/// patch edges), so no value outside the rendering set is ever touched.
pub fn dfd_from_values(samples: &PatchSampleSet, values: &[f64]) -> Result<(Vec<Vec3>, Vec<bool>)> {
    let p = samples.patch_size;
    if p < 2 {
        return Err(Error::invalid(
            "DFD needs a patch of at least 2x2 pixels for cross-ray differences",
        ));
    }
    let area = samples.patch_area();
    assert_eq!(values.len(), samples.n_points());
    let mut grads = vec![Vec3::zeros(); values.len()];
    let mut valid = vec![false; values.len()];

    for (pi, range) in samples.patch_ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let single = range.len() < 2;
        let patch = &samples.patches[pi];
        for s in range.clone() {
            for slot in 0..area {
                if single {
                    continue;
                }
                let (dy, dx) = (slot / p, slot % p);
                let i = samples.point(s, slot);

                let dd_ray = if s > range.start && s + 1 < range.end {
                    let (lo, hi) = (samples.point(s - 1, slot), samples.point(s + 1, slot));
                    (values[hi] - values[lo]) / (samples.t_grid[hi] - samples.t_grid[lo])
                } else if s + 1 < range.end {
                    let hi = samples.point(s + 1, slot);
                    (values[hi] - values[i]) / (samples.t_grid[hi] - samples.t_grid[i])
                } else {
                    let lo = samples.point(s - 1, slot);
                    (values[i] - values[lo]) / (samples.t_grid[i] - samples.t_grid[lo])
                };

                let cross = |a: usize, b: usize| {
                    let (ia, ib) = (samples.point(s, a), samples.point(s, b));
                    (values[ib] - values[ia])
                        / (samples.positions[ib] - samples.positions[ia]).norm()
                };
                let dd_x = if dx > 0 && dx + 1 < p {
                    cross(slot - 1, slot + 1)
                } else if dx + 1 < p {
                    cross(slot, slot + 1)
                } else {
                    cross(slot - 1, slot)
                };
                let dd_y = if dy > 0 && dy + 1 < p {
                    cross(slot - p, slot + p)
                } else if dy + 1 < p {
                    cross(slot, slot + p)
                } else {
                    cross(slot - p, slot)
                };

                grads[i] = grad_dfd(&Vec3::new(dd_x, dd_y, dd_ray), &patch.bases[slot]);
                valid[i] = true;
            }
        }
    }
    Ok((grads, valid))
}

/// Transpose of `dfd_from_values`: pull per-point gradient adjoints back to
/// per-point value adjoints (the only path DFD uses, keeping the backward
/// pass first-order).
pub fn dfd_backprop_to_values(
    samples: &PatchSampleSet,
    grad_adj: &[Vec3],
    valid: &[bool],
    val_adj: &mut [f64],
) {
    let p = samples.patch_size;
    let area = samples.patch_area();
    for (pi, range) in samples.patch_ranges.iter().enumerate() {
        if range.len() < 2 {
            continue;
        }
        let patch = &samples.patches[pi];
        for s in range.clone() {
            for slot in 0..area {
                let i = samples.point(s, slot);
                if !valid[i] {
                    continue;
                }
                let a = grad_adj[i];
                if a == Vec3::zeros() {
                    continue;
                }
                let u = patch.bases[slot].v_inv.transpose() * a;
                let (dy, dx) = (slot / p, slot % p);

                if s > range.start && s + 1 < range.end {
                    let (lo, hi) = (samples.point(s - 1, slot), samples.point(s + 1, slot));
                    let w = u.z / (samples.t_grid[hi] - samples.t_grid[lo]);
                    val_adj[hi] += w;
                    val_adj[lo] -= w;
                } else if s + 1 < range.end {
                    let hi = samples.point(s + 1, slot);
                    let w = u.z / (samples.t_grid[hi] - samples.t_grid[i]);
                    val_adj[hi] += w;
                    val_adj[i] -= w;
                } else {
                    let lo = samples.point(s - 1, slot);
                    let w = u.z / (samples.t_grid[i] - samples.t_grid[lo]);
                    val_adj[i] += w;
                    val_adj[lo] -= w;
                }

                let mut cross = |a_slot: usize, b_slot: usize, coeff: f64| {
                    let (ia, ib) = (samples.point(s, a_slot), samples.point(s, b_slot));
                    let w = coeff / (samples.positions[ib] - samples.positions[ia]).norm();
                    val_adj[ib] += w;
                    val_adj[ia] -= w;
                };
                if dx > 0 && dx + 1 < p {
                    cross(slot - 1, slot + 1, u.x);
                } else if dx + 1 < p {
                    cross(slot, slot + 1, u.x);
                } else {
                    cross(slot - 1, slot, u.x);
                }
                if dy > 0 && dy + 1 < p {
                    cross(slot - p, slot + p, u.y);
                } else if dy + 1 < p {
                    cross(slot, slot + p, u.y);
                } else {
                    cross(slot - p, slot, u.y);
                }
            }
        }
    }
}

/// The six-point stencil for axis-aligned FD over a set of points. Points
/// whose stencil would leave the bound cube are culled (and counted).
pub struct FdStencil {
    pub positions: Vec<Vec3>,
    pub sample_ids: Vec<u32>,
    pub culled: usize,
}

pub fn build_fd_stencil(points: &[Vec3], epsilon: f64, bound: f64) -> FdStencil {
    let mut positions = Vec::new();
    let mut sample_ids = Vec::new();
    let mut culled = 0usize;
    for (i, x) in points.iter().enumerate() {
        let inside = (0..3).all(|k| x[k] + epsilon <= bound && x[k] - epsilon >= -bound);
        if !inside {
            culled += 1;
            continue;
        }
        sample_ids.push(i as u32);
        for k in 0..3 {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += epsilon;
            xm[k] -= epsilon;
            positions.push(xp);
            positions.push(xm);
        }
    }
    FdStencil {
        positions,
        sample_ids,
        culled,
    }
}

pub fn gradients_from_stencil(
    stencil: &FdStencil,
    stencil_values: &[f64],
    epsilon: f64,
    n_points: usize,
) -> (Vec<Vec3>, Vec<bool>) {
    let mut grads = vec![Vec3::zeros(); n_points];
    let mut valid = vec![false; n_points];
    for (j, &id) in stencil.sample_ids.iter().enumerate() {
        let base = j * 6;
        let g = Vec3::new(
            (stencil_values[base] - stencil_values[base + 1]) / (2.0 * epsilon),
            (stencil_values[base + 2] - stencil_values[base + 3]) / (2.0 * epsilon),
            (stencil_values[base + 4] - stencil_values[base + 5]) / (2.0 * epsilon),
        );
        grads[id as usize] = g;
        valid[id as usize] = true;
    }
    (grads, valid)
}

/// Gradient adjoints pulled back onto the stencil evaluations.
pub fn fd_backprop_to_stencil(
    stencil: &FdStencil,
    grad_adj: &[Vec3],
    epsilon: f64,
) -> Vec<f64> {
    let mut adj = vec![0.0; stencil.positions.len()];
    for (j, &id) in stencil.sample_ids.iter().enumerate() {
        let a = grad_adj[id as usize];
        let base = j * 6;
        for k in 0..3 {
            let w = a[k] / (2.0 * epsilon);
            adj[base + 2 * k] += w;
            adj[base + 2 * k + 1] -= w;
        }
    }
    adj
}

/// Per-sample spatial gradients for a batch under the chosen mode,
/// evaluating the field as needed and reporting the evaluation counts.
pub fn spatial_gradients<F: DifferentiableSdf>(
    field: &F,
    samples: &PatchSampleSet,
    mode: GradMode,
) -> Result<SpatialGradients> {
    let mut counter = EvalCounter::default();
    match mode {
        GradMode::Analytic => {
            let (_, grads) = field.values_and_gradients(&samples.positions)?;
            counter.rendering += samples.n_points() as u64;
            Ok(SpatialGradients {
                valid: vec![true; grads.len()],
                gradients: grads,
                counter,
                culled: 0,
            })
        }
        GradMode::Dfd => {
            let values = field.values(&samples.positions)?;
            counter.rendering += samples.n_points() as u64;
            let (gradients, valid) = dfd_from_values(samples, &values)?;
            Ok(SpatialGradients {
                gradients,
                valid,
                counter,
                culled: 0,
            })
        }
        GradMode::AxisFd { epsilon } => {
            if epsilon <= 0.0 {
                return Err(Error::invalid("finite-difference step must be positive"));
            }
            let _values = field.values(&samples.positions)?;
            counter.rendering += samples.n_points() as u64;
            let stencil = build_fd_stencil(&samples.positions, epsilon, field.bound_radius());
            let stencil_values = field.values(&stencil.positions)?;
            counter.gradient_extra += stencil.positions.len() as u64;
            let (gradients, valid) =
                gradients_from_stencil(&stencil, &stencil_values, epsilon, samples.n_points());
            Ok(SpatialGradients {
                gradients,
                valid,
                counter,
                culled: stencil.culled,
            })
        }
    }
}
