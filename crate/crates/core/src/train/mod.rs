//! Loss assembly (normal + mask + eikonal), the optimizer and the training
//! loop.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{AnalyticSdf, HashGridConfig, SdfField, SdfGrads};
use crate::grad::{dfd_backprop_to_values, fd_backprop_to_stencil, EvalCounter, GradBackend, GradMode};
use crate::render::{backprop_weights_to_values, render_patches, RenderBatch};
use crate::sampling::{
    sample_batch, update_occupancy, update_occupancy_incremental, OccupancyGrid, PatchSampleSet,
    SampleConfig, SamplerContext, StepSchedule,
};
use crate::scene::{NormalView, FOREGROUND_THRESHOLD};
use crate::Vec3;

const OPACITY_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// lambda_1, the mask term.
    pub mask: f64,
    /// lambda_2, the eikonal term.
    pub eikonal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 1.0,
            eikonal: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub normal: f64,
    pub mask: f64,
    pub eikonal: f64,
}

fn bce(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

fn bce_grad(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p - target) / (p * (1.0 - p))
}

struct LossTerms {
    breakdown: LossBreakdown,
    /// dL/dw_i per sample point.
    weight_adj: Vec<f64>,
    /// dL/d grad_i per sample point.
    grad_adj: Vec<Vec3>,
}

/// Loss terms are batch means (not the raw sums) so the lambda weights stay
/// scale-free across batch sizes: the normal term averages over foreground
/// pixels, the mask term over all patch pixels, the eikonal term over all
/// valid gradient samples.
fn loss_terms(
    samples: &PatchSampleSet,
    batch: &RenderBatch,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let area = samples.patch_area();
    let n_px = (samples.patches.len() * area).max(1);
    let mut n_fg = 0usize;
    for patch in &samples.patches {
        n_fg += patch
            .mask
            .iter()
            .filter(|&&m| m > FOREGROUND_THRESHOLD)
            .count();
    }
    let n_fg = n_fg.max(1);
    let n_eik = batch.grad_valid.iter().filter(|&&v| v).count().max(1);

    let mut normal_term = 0.0;
    let mut mask_term = 0.0;
    let mut eik_term = 0.0;
    let mut weight_adj = vec![0.0f64; samples.n_points()];
    let mut grad_adj = vec![Vec3::zeros(); samples.n_points()];

    for (pi, patch) in samples.patches.iter().enumerate() {
        let rendered = &batch.patches[pi];
        let range = &samples.patch_ranges[pi];
        for slot in 0..area {
            let o_hat = rendered.opacity_hat[slot];
            let o_label = patch.mask[slot] as f64;
            mask_term += bce(o_hat, o_label);
            let d_mask = weights.mask * bce_grad(o_hat, o_label) / n_px as f64;

            let fg = patch.mask[slot] > FOREGROUND_THRESHOLD;
            let mut d_normal = Vec3::zeros();
            if fg {
                let resid = rendered.normal_hat[slot] - patch.normals[slot];
                normal_term += resid.norm_squared();
                d_normal = 2.0 * resid / n_fg as f64;
            }
            for s in range.clone() {
                let i = samples.point(s, slot);
                weight_adj[i] = d_mask
                    + if fg {
                        d_normal.dot(&batch.gradients[i]) * (batch.grad_valid[i] as i32 as f64)
                    } else {
                        0.0
                    };
                if batch.grad_valid[i] {
                    let mut ga = if fg {
                        batch.weights[i] * d_normal
                    } else {
                        Vec3::zeros()
                    };
                    let g = batch.gradients[i];
                    let norm = g.norm();
                    eik_term += (norm - 1.0) * (norm - 1.0);
                    if norm > 0.0 {
                        ga += weights.eikonal * 2.0 * (norm - 1.0) / n_eik as f64 * (g / norm);
                    }
                    grad_adj[i] = ga;
                }
            }
        }
    }
    // The eikonal sum above visits each valid point exactly once because a
    // point belongs to exactly one (patch, slot, sample) triple.
    let breakdown = LossBreakdown {
        normal: normal_term / n_fg as f64,
        mask: mask_term / n_px as f64,
        eikonal: eik_term / n_eik as f64,
        total: normal_term / n_fg as f64
            + weights.mask * mask_term / n_px as f64
            + weights.eikonal * eik_term / n_eik as f64,
    };
    if !breakdown.total.is_finite() {
        let bad = batch
            .patches
            .iter()
            .position(|p| {
                p.opacity_hat.iter().any(|o| !o.is_finite())
                    || p.normal_hat.iter().any(|n| !n.x.is_finite())
            })
            .unwrap_or(0);
        let info = &samples.patches[bad];
        return Err(Error::internal(format!(
            "non-finite loss (normal={} mask={} eik={}); first bad patch {bad} view {} center {:?}",
            breakdown.normal, breakdown.mask, breakdown.eikonal, info.view, info.center_px
        )));
    }
    Ok(LossTerms {
        breakdown,
        weight_adj,
        grad_adj,
    })
}

/// Forward-only loss for finite-difference oracles.
pub fn loss_forward(
    field: &SdfField,
    samples: &PatchSampleSet,
    mode: GradMode,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let batch = render_patches(field, samples, mode, field.sharpness())?;
    Ok(loss_terms(samples, &batch, weights)?.breakdown)
}

/// Full loss with parameter backprop. The gradient path to parameters is
/// first-order (through the individual value tapes) for DFD and axis FD,
/// and includes the differentiated-gradient path for the analytic mode.
pub fn loss_and_backward(
    field: &SdfField,
    samples: &PatchSampleSet,
    batch: &RenderBatch,
    weights: &LossWeights,
    grads: &mut SdfGrads,
) -> Result<LossBreakdown> {
    let terms = loss_terms(samples, batch, weights)?;

    let render_adj = backprop_weights_to_values(samples, batch, &terms.weight_adj);
    let mut value_adj = render_adj.value_adj;
    grads.sharpness_raw += render_adj.sharpness_adj * batch.sharpness;

    match batch.mode {
        GradMode::Dfd => {
            dfd_backprop_to_values(samples, &terms.grad_adj, &batch.grad_valid, &mut value_adj);
            field.backward_batch(&samples.positions, &value_adj, None, grads);
        }
        GradMode::AxisFd { .. } => {
            field.backward_batch(&samples.positions, &value_adj, None, grads);
            if let Some((stencil, eps)) = &batch.fd_stencil {
                let stencil_adj = fd_backprop_to_stencil(stencil, &terms.grad_adj, *eps);
                field.backward_batch(&stencil.positions, &stencil_adj, None, grads);
            }
        }
        GradMode::Analytic => {
            field.backward_batch(
                &samples.positions,
                &value_adj,
                Some(&terms.grad_adj),
                grads,
            );
        }
    }
    Ok(terms.breakdown)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batches: usize,
    pub patches_per_batch: usize,
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_batches: usize,
    pub step_start: f64,
    pub step_end: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub backend: GradBackend,
    pub weights: LossWeights,
    pub hash: HashGridConfig,
    pub init_radius: f64,
    pub init_sharpness: f64,
    pub occupancy_resolution: u32,
    pub occupancy_every: usize,
    pub snapshot_every: usize,
}

impl TrainConfig {
    /// The benchmark protocol: 5000 batches of 2048 3x3 patches, lr 5e-3,
    /// marching step 1e-2 -> 5e-4.
    pub fn benchmark() -> Self {
        TrainConfig {
            batches: 5000,
            patches_per_batch: 2048,
            patch_size: 3,
            lr_init: 5e-3,
            lr_final: 3e-4,
            warmup_batches: 100,
            step_start: 1e-2,
            step_end: 5e-4,
            seed: 0,
            deterministic: false,
            backend: GradBackend::Dfd,
            weights: LossWeights::default(),
            hash: HashGridConfig::standard(),
            init_radius: 0.7,
            init_sharpness: 100.0,
            occupancy_resolution: 128,
            occupancy_every: 8,
            snapshot_every: 50,
        }
    }

    /// High-resolution preset (long schedule).
    pub fn high_res() -> Self {
        TrainConfig {
            batches: 30_000,
            ..Self::benchmark()
        }
    }

    /// CPU-sized preset used by tests: smaller tables and fewer patches.
    pub fn desk() -> Self {
        TrainConfig {
            patches_per_batch: 512,
            hash: HashGridConfig::desk(),
            ..Self::benchmark()
        }
    }

    pub fn learning_rate(&self, batch: usize) -> f64 {
        if batch < self.warmup_batches {
            return self.lr_init * (batch as f64 + 1.0) / self.warmup_batches as f64;
        }
        let t = (batch - self.warmup_batches) as f64
            / (self.batches.saturating_sub(self.warmup_batches)).max(1) as f64;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * t.clamp(0.0, 1.0)).cos());
        self.lr_final + (self.lr_init - self.lr_final) * c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches == 0 || self.patches_per_batch == 0 {
            return Err(Error::invalid("batches and patches_per_batch must be positive"));
        }
        if self.patch_size < 2 && self.backend == GradBackend::Dfd {
            return Err(Error::invalid("DFD needs patches of at least 2x2 pixels"));
        }
        if !(self.step_start > 0.0 && self.step_end > 0.0 && self.step_end <= self.step_start) {
            return Err(Error::invalid("marching steps must satisfy 0 < step_end <= step_start"));
        }
        self.hash.validate()
    }
}

#[derive(Debug, Clone)]
pub struct BatchMetrics {
    pub batch: usize,
    pub loss: LossBreakdown,
    pub step_size: f64,
    pub fwd_ms: f64,
    pub bwd_ms: f64,
    pub sdf_evals: u64,
}

#[derive(Debug, Default, Clone)]
pub struct TrainReport {
    pub metrics: Vec<BatchMetrics>,
    pub counter: EvalCounter,
    pub fwd_ms_total: f64,
    pub bwd_ms_total: f64,
    /// Sample positions visited by the parameter backward passes.
    pub backward_samples: u64,
    pub culled_stencil_samples: u64,
    pub skipped_views: Vec<u32>,
    /// Set when training aborted on divergence: the returned field is the
    /// last good snapshot.
    pub diverged_at: Option<usize>,
}

/// Distance allowed through interior cells before a ray stops: roughly
/// where transmittance past a crossing falls under 1%, capped so early
/// low-sharpness batches stay affordable.
pub fn interior_budget(sharpness: f64, step: f64) -> f64 {
    (4.6 / sharpness).min(0.12) + 2.0 * step
}

pub enum TrainEvent<'a> {
    BatchDone(&'a BatchMetrics),
    OccupancyUpdated { batch: usize, occupied_cells: usize },
    Diverged { batch: usize, detail: String },
}

/// Optimize a field against the views. Deterministic for a fixed seed
/// regardless of thread count.
pub fn train(
    views: &[NormalView],
    config: &TrainConfig,
    sink: &mut dyn FnMut(TrainEvent),
) -> Result<(SdfField, TrainReport)> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::invalid("training needs at least one view"));
    }
    let bound = config.hash.bound_radius;
    let patch_radius = (config.patch_size / 2) as u32;

    let mut field = SdfField::geometric_init(
        config.hash.clone(),
        config.init_radius,
        config.init_sharpness,
        config.seed,
    )?;
    let bases: Result<Vec<_>> = views.iter().map(|v| v.build_bases(patch_radius)).collect();
    let bases = bases?;
    let ctx = SamplerContext::build(views, patch_radius)?;

    let mut grid = OccupancyGrid::new(config.occupancy_resolution, bound);
    // Early batches must see the init surface before the first field update.
    update_occupancy(
        &mut grid,
        &AnalyticSdf::sphere(Vec3::zeros(), config.init_radius),
    );

    let schedule = StepSchedule::new(config.step_start, config.step_end, config.batches);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grads = SdfGrads::zeros_like(&field);
    let mut adam_state = AdamState::new(&field);
    let adam_cfg = AdamConfig::default();
    let mut report = TrainReport {
        skipped_views: ctx.skipped_views.clone(),
        ..TrainReport::default()
    };
    let mut last_good = field.clone();
    let mut bad_streak = 0usize;

    for batch_idx in 0..config.batches {
        if batch_idx > 0 && batch_idx % config.occupancy_every == 0 {
            // Full sweep periodically; cheap dilated refresh in between (the
            // zero set moves far slower than 3 cells per 8 batches).
            if batch_idx % (config.occupancy_every * 8) == 0 {
                update_occupancy(&mut grid, &field);
            } else {
                update_occupancy_incremental(&mut grid, &field, 3);
            }
            sink(TrainEvent::OccupancyUpdated {
                batch: batch_idx,
                occupied_cells: grid.occupied_cell_count(),
            });
        }
        let step = schedule.step(batch_idx);
        let sharpness = field.sharpness();
        let sample_cfg = SampleConfig {
            n_patches: config.patches_per_batch,
            patch_size: config.patch_size,
            jitter: true,
            interior_budget: interior_budget(sharpness, step),
        };

        let t_fwd = Instant::now();
        let samples = sample_batch(views, &bases, &ctx, &grid, step, &sample_cfg, &mut rng)?;
        let mode = config.backend.to_mode(step);
        let rendered = render_patches(&field, &samples, mode, sharpness)?;
        let fwd_ms = t_fwd.elapsed().as_secs_f64() * 1e3;

        let t_bwd = Instant::now();
        grads.clear();
        let loss = loss_and_backward(&field, &samples, &rendered, &config.weights, &mut grads);
        let bwd_ms = t_bwd.elapsed().as_secs_f64() * 1e3;

        let loss = match loss {
            Ok(l) if l.total.is_finite() && l.total < 1e6 => {
                bad_streak = 0;
                l
            }
            bad => {
                bad_streak += 1;
                let detail = match bad {
                    Ok(l) => format!("loss {l:?}"),
                    Err(e) => e.to_string(),
                };
                sink(TrainEvent::Diverged {
                    batch: batch_idx,
                    detail: detail.clone(),
                });
                if bad_streak >= 10 {
                    report.diverged_at = Some(batch_idx);
                    return Ok((last_good, report));
                }
                continue; // skip the optimizer step for this batch
            }
        };

        adam_step(
            &mut field,
            &grads,
            &mut adam_state,
            config.learning_rate(batch_idx),
            &adam_cfg,
        );

        report.counter.merge(&rendered.counter);
        report.fwd_ms_total += fwd_ms;
        report.bwd_ms_total += bwd_ms;
        report.backward_samples += samples.n_points() as u64
            + rendered
                .fd_stencil
                .as_ref()
                .map_or(0, |(st, _)| st.positions.len() as u64);
        report.culled_stencil_samples += rendered.culled as u64;
        if batch_idx % config.snapshot_every == 0 {
            last_good = field.clone();
        }
        let metrics = BatchMetrics {
            batch: batch_idx,
            loss,
            step_size: step,
            fwd_ms,
            bwd_ms,
            sdf_evals: rendered.counter.forward_sdf_evals(),
        };
        sink(TrainEvent::BatchDone(&metrics));
        report.metrics.push(metrics);
    }
    Ok((field, report))
}
