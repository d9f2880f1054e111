//! The parametric signed distance field: multi-resolution hash encoding
//! feeding a one-hidden-layer ReLU MLP, plus closed-form shapes used as
//! oracles.
//!
//! All arithmetic runs in f64; hash features are stored f32 (they dominate
//! memory traffic and the data is f32 anyway). The backward pass does not
//! store activations — it recomputes them per sample and scatters parameter
//! gradients through a fixed-shard reduction, so results are independent of
//! thread count.

mod analytic;
mod hash;

pub use analytic::AnalyticSdf;
pub use hash::HashGridConfig;

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Vec3;
use hash::{build_layout, corner_set, normalize_position, CornerSet, LevelLayout};

pub const HIDDEN: usize = 64;

const SUBCHUNK: usize = 1024;
const MACROCHUNK: usize = 32 * SUBCHUNK;
/// Feature-gradient scatter runs over fixed entry ranges of 2^SHARD_SHIFT
/// relative to the table size, so routing is a shift, not a division.
const SHARD_TARGET: usize = 32;

/// Anything that yields a scalar field value; meshing, occupancy and
/// rendering are generic over this.
pub trait ScalarField: Sync {
    fn value(&self, p: &Vec3) -> f64;
}

/// Fields with a closed-form (or exactly differentiated) spatial gradient.
pub trait GradientField: ScalarField {
    fn gradient(&self, p: &Vec3) -> Vec3;
}

impl ScalarField for AnalyticSdf {
    fn value(&self, p: &Vec3) -> f64 {
        AnalyticSdf::value(self, p)
    }
}

impl GradientField for AnalyticSdf {
    fn gradient(&self, p: &Vec3) -> Vec3 {
        AnalyticSdf::gradient(self, p)
    }
}

#[derive(Clone)]
pub struct SdfField {
    cfg: HashGridConfig,
    layouts: Vec<LevelLayout>,
    total_entries: usize,
    pub features: Vec<f32>,
    /// Hidden-layer weights stored input-major (column-major): entry
    /// [k * HIDDEN + j] couples input k to hidden unit j. The checkpoint
    /// stores the conventional row-major order; conversion happens on IO.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub sharpness_raw: f64,
}

struct EvalScratch {
    enc: Vec<f64>,
    z: [f64; HIDDEN],
    corners: Vec<CornerSet>,
}

impl EvalScratch {
    fn new(field: &SdfField) -> Self {
        EvalScratch {
            enc: vec![0.0; field.in_dim()],
            z: [0.0; HIDDEN],
            corners: vec![
                CornerSet {
                    idx: [0; 8],
                    weight: [0.0; 8],
                    dweight: [[0.0; 3]; 8],
                };
                field.cfg.levels
            ],
        }
    }
}

impl SdfField {
    /// Initialize so the zero level set approximates a sphere of
    /// `init_radius`: the hidden layer's position block holds antithetic
    /// pairs of quasi-uniform directions (so the positive combination of
    /// ReLU pairs reproduces a calibrated norm), encoding columns start
    /// near zero, and the output bias places the sphere.
    pub fn geometric_init(
        cfg: HashGridConfig,
        init_radius: f64,
        init_sharpness: f64,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if init_sharpness <= 0.0 {
            return Err(Error::invalid("initial sharpness must be positive"));
        }
        let (layouts, total_entries) = build_layout(&cfg);
        let f = cfg.features_per_level;
        let in_dim = cfg.encoded_width() + 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut features = vec![0.0f32; total_entries * f];
        for v in features.iter_mut() {
            *v = (rng.random::<f64>() * 2e-4 - 1e-4) as f32;
        }

        let enc_w = cfg.encoded_width();
        let enc_std = (2.0 / HIDDEN as f64).sqrt();
        let mut w1 = vec![0.0f64; HIDDEN * in_dim];
        let pairs = HIDDEN / 2;
        let dirs: Vec<Vec3> = (0..pairs).map(|i| fibonacci_direction(i, pairs)).collect();
        for (p, d) in dirs.iter().enumerate() {
            for (row, sign) in [(2 * p, 1.0), (2 * p + 1, -1.0)] {
                for k in 0..enc_w {
                    w1[k * HIDDEN + row] = normal_sample(&mut rng) * enc_std;
                }
                w1[enc_w * HIDDEN + row] = sign * d.x;
                w1[(enc_w + 1) * HIDDEN + row] = sign * d.y;
                w1[(enc_w + 2) * HIDDEN + row] = sign * d.z;
            }
        }

        // Calibrate the output scale so sum_pairs |d_p . x| maps to |x|.
        let probe = 512;
        let mut mean_abs = 0.0;
        for i in 0..probe {
            let x = fibonacci_direction(i, probe);
            mean_abs += dirs.iter().map(|d| d.dot(&x).abs()).sum::<f64>();
        }
        mean_abs /= probe as f64;
        let out_scale = 1.0 / mean_abs;

        let b1: Vec<f64> = (0..HIDDEN).map(|_| normal_sample(&mut rng) * 1e-4).collect();
        let w2: Vec<f64> = (0..HIDDEN)
            .map(|_| out_scale + normal_sample(&mut rng) * 1e-4)
            .collect();

        Ok(SdfField {
            cfg,
            layouts,
            total_entries,
            features,
            w1,
            b1,
            w2,
            b2: -init_radius,
            sharpness_raw: init_sharpness.ln(),
        })
    }

    pub fn cfg(&self) -> &HashGridConfig {
        &self.cfg
    }

    pub fn total_entries(&self) -> usize {
        self.total_entries
    }

    pub fn in_dim(&self) -> usize {
        self.cfg.encoded_width() + 3
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness_raw.exp()
    }

    pub fn bound_radius(&self) -> f64 {
        self.cfg.bound_radius
    }

    fn shard_shift(&self) -> u32 {
        let target = self.total_entries.div_ceil(SHARD_TARGET);
        usize::BITS - target.next_power_of_two().leading_zeros() - 1
    }

    fn num_shards(&self) -> usize {
        self.total_entries.div_ceil(1 << self.shard_shift())
    }

    fn check_finite(&self) -> Result<()> {
        for (name, slice) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2)] {
            if let Some(i) = slice.iter().position(|v| !v.is_finite()) {
                return Err(Error::internal(format!("non-finite parameter {name}[{i}]")));
            }
        }
        if !self.b2.is_finite() || !self.sharpness_raw.is_finite() {
            return Err(Error::internal("non-finite scalar parameter (b2 or sharpness)"));
        }
        Ok(())
    }

    /// The multi-level feature encoding of `x` (position not included).
    pub fn encode(&self, x: &Vec3) -> Result<Vec<f64>> {
        let mut s = EvalScratch::new(self);
        self.prepare(x, false, &mut s)?;
        Ok(s.enc[..self.cfg.encoded_width()].to_vec())
    }

    fn prepare(&self, x: &Vec3, with_grad: bool, s: &mut EvalScratch) -> Result<()> {
        let u = normalize_position(&self.cfg, x)?;
        let f = self.cfg.features_per_level;
        let inv_extent = 1.0 / (2.0 * self.cfg.bound_radius);
        for (l, layout) in self.layouts.iter().enumerate() {
            let cs = corner_set(layout, &u, inv_extent, with_grad);
            let out = &mut s.enc[l * f..(l + 1) * f];
            out.fill(0.0);
            for b in 0..8 {
                let base = (layout.offset + cs.idx[b] as usize) * f;
                debug_assert!(base + f <= self.features.len());
                let w = cs.weight[b];
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * unsafe { *self.features.get_unchecked(base + c) } as f64;
                }
            }
            s.corners[l] = cs;
        }
        let enc_w = self.cfg.encoded_width();
        s.enc[enc_w] = x.x;
        s.enc[enc_w + 1] = x.y;
        s.enc[enc_w + 2] = x.z;
        Ok(())
    }

    /// Hidden pre-activations from the prepared encoding; returns f.
    fn forward(&self, s: &mut EvalScratch) -> f64 {
        let in_dim = self.in_dim();
        s.z.copy_from_slice(&self.b1);
        for k in 0..in_dim {
            let e = s.enc[k];
            let col: &[f64; HIDDEN] = self.w1[k * HIDDEN..(k + 1) * HIDDEN]
                .try_into()
                .unwrap();
            for j in 0..HIDDEN {
                s.z[j] += col[j] * e;
            }
        }
        let mut out = self.b2;
        for j in 0..HIDDEN {
            if s.z[j] > 0.0 {
                out += self.w2[j] * s.z[j];
            }
        }
        out
    }

    /// q = W1^T (w2 .* relu'(z)): the derivative of f with respect to the
    /// MLP input vector. Shared by the spatial gradient and the backward pass.
    fn input_adjoint(&self, s: &EvalScratch, q: &mut [f64]) {
        let in_dim = self.in_dim();
        let mut m = [0.0f64; HIDDEN];
        for j in 0..HIDDEN {
            if s.z[j] > 0.0 {
                m[j] = self.w2[j];
            }
        }
        for (k, qk) in q.iter_mut().enumerate().take(in_dim) {
            let col: &[f64; HIDDEN] = self.w1[k * HIDDEN..(k + 1) * HIDDEN]
                .try_into()
                .unwrap();
            let mut acc = 0.0;
            for j in 0..HIDDEN {
                acc += col[j] * m[j];
            }
            *qk = acc;
        }
    }

    fn gradient_from(&self, s: &EvalScratch, q: &[f64]) -> Vec3 {
        let f = self.cfg.features_per_level;
        let enc_w = self.cfg.encoded_width();
        let mut grad = Vec3::new(q[enc_w], q[enc_w + 1], q[enc_w + 2]);
        for (l, layout) in self.layouts.iter().enumerate() {
            let cs = &s.corners[l];
            let qs = &q[l * f..(l + 1) * f];
            for b in 0..8 {
                let base = (layout.offset + cs.idx[b] as usize) * f;
                let mut coeff = 0.0;
                for (c, qv) in qs.iter().enumerate() {
                    coeff += qv * self.features[base + c] as f64;
                }
                let dw = cs.dweight[b];
                grad.x += coeff * dw[0];
                grad.y += coeff * dw[1];
                grad.z += coeff * dw[2];
            }
        }
        grad
    }

    /// Signed distance at a single point inside the bound cube.
    pub fn sdf(&self, x: &Vec3) -> Result<f64> {
        self.check_finite()?;
        let mut s = EvalScratch::new(self);
        self.prepare(x, false, &mut s)?;
        Ok(self.forward(&mut s))
    }

    /// Exact spatial gradient of the piecewise-trilinear composite.
    pub fn analytic_spatial_gradient(&self, x: &Vec3) -> Result<Vec3> {
        let mut s = EvalScratch::new(self);
        self.prepare(x, true, &mut s)?;
        self.forward(&mut s);
        let mut q = vec![0.0; self.in_dim()];
        self.input_adjoint(&s, &mut q);
        Ok(self.gradient_from(&s, &q))
    }

    /// Batched evaluation; the returned tape drives parameter backprop over
    /// the same positions.
    pub fn sdf_batch<'a>(&'a self, xs: &'a [Vec3]) -> Result<(Vec<f64>, SdfTape<'a>)> {
        let values = self.values(xs)?;
        Ok((
            values,
            SdfTape {
                field: self,
                positions: xs,
            },
        ))
    }

    pub fn values(&self, xs: &[Vec3]) -> Result<Vec<f64>> {
        self.check_finite()?;
        let chunks: Result<Vec<Vec<f64>>> = xs
            .par_chunks(512)
            .map(|chunk| {
                let mut s = EvalScratch::new(self);
                chunk
                    .iter()
                    .map(|x| {
                        self.prepare(x, false, &mut s)?;
                        Ok(self.forward(&mut s))
                    })
                    .collect()
            })
            .collect();
        Ok(chunks?.concat())
    }

    /// Values and exact gradients in one pass (analytic-gradient rendering).
    pub fn values_and_gradients(&self, xs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        self.check_finite()?;
        let chunks: Result<Vec<Vec<(f64, Vec3)>>> = xs
            .par_chunks(512)
            .map(|chunk| {
                let mut s = EvalScratch::new(self);
                let mut q = vec![0.0; self.in_dim()];
                chunk
                    .iter()
                    .map(|x| {
                        self.prepare(x, true, &mut s)?;
                        let v = self.forward(&mut s);
                        self.input_adjoint(&s, &mut q);
                        Ok((v, self.gradient_from(&s, &q)))
                    })
                    .collect()
            })
            .collect();
        let flat = chunks?.concat();
        Ok(flat.iter().map(|p| p.0).collect::<Vec<_>>())
            .map(|vals| (vals, flat.iter().map(|p| p.1).collect()))
    }

    /// Total evaluation with coordinates clamped to the bound cube; used by
    /// grid sweeps (occupancy, marching cubes) whose domains touch the faces.
    pub fn value_clamped(&self, p: &Vec3) -> f64 {
        let b = self.cfg.bound_radius;
        let q = Vec3::new(p.x.clamp(-b, b), p.y.clamp(-b, b), p.z.clamp(-b, b));
        let mut s = EvalScratch::new(self);
        self.prepare(&q, false, &mut s).expect("clamped position is in bound");
        self.forward(&mut s)
    }

    /// Accumulate parameter gradients for `sum_i adj[i] * f(xs[i])` plus,
    /// when `spatial_adj` is given, `sum_i spatial_adj[i] . grad f(xs[i])`.
    /// ReLU second derivatives vanish almost everywhere, so the spatial path
    /// stays first-order in the activations.
    pub fn backward_batch(
        &self,
        xs: &[Vec3],
        val_adj: &[f64],
        spatial_adj: Option<&[Vec3]>,
        grads: &mut SdfGrads,
    ) {
        assert_eq!(xs.len(), val_adj.len());
        if let Some(sa) = spatial_adj {
            assert_eq!(xs.len(), sa.len());
        }
        let f = self.cfg.features_per_level;
        let in_dim = self.in_dim();
        let shard_shift = self.shard_shift();
        let num_shards = self.num_shards();
        let shard_bounds: Vec<usize> = (0..=num_shards)
            .map(|s| (s << shard_shift).min(self.total_entries))
            .collect();

        let mut start = 0;
        while start < xs.len() {
            let end = (start + MACROCHUNK).min(xs.len());
            let sub_ranges: Vec<(usize, usize)> = (start..end)
                .step_by(SUBCHUNK)
                .map(|s| (s, (s + SUBCHUNK).min(end)))
                .collect();

            let locals: Vec<(MlpGrads, Vec<ShardRecords>)> = sub_ranges
                .par_iter()
                .map(|&(lo, hi)| {
                    let mut mlp = MlpGrads::new(in_dim);
                    let per_shard = ((hi - lo) * self.cfg.levels * 8).div_ceil(num_shards) * 2;
                    let mut shards: Vec<ShardRecords> = (0..num_shards)
                        .map(|_| ShardRecords::with_capacity(per_shard, f))
                        .collect();
                    let mut s = EvalScratch::new(self);
                    let mut q = vec![0.0; in_dim];
                    let mut p = vec![0.0; in_dim];
                    for i in lo..hi {
                        let g = spatial_adj.map(|sa| sa[i]);
                        self.backward_one(
                            &xs[i],
                            val_adj[i],
                            g,
                            shard_shift,
                            &mut s,
                            &mut q,
                            &mut p,
                            &mut mlp,
                            &mut shards,
                        );
                    }
                    (mlp, shards)
                })
                .collect();

            for (mlp, _) in &locals {
                mlp.add_into(grads);
            }
            // Feature gradients: each shard owns a disjoint entry range and
            // applies records in sub-chunk order, so the result does not
            // depend on the thread count.
            let mut slices: Vec<&mut [f32]> = Vec::with_capacity(num_shards);
            let mut rest: &mut [f32] = &mut grads.features;
            for sgi in 0..num_shards {
                let len = (shard_bounds[sgi + 1] - shard_bounds[sgi]) * f;
                let (head, tail) = rest.split_at_mut(len);
                slices.push(head);
                rest = tail;
            }
            slices
                .par_iter_mut()
                .enumerate()
                .for_each(|(shard, slice)| {
                    let lo_entry = shard_bounds[shard];
                    for (_, shards) in &locals {
                        let rec = &shards[shard];
                        let wide = f.min(2);
                        for (r, p) in rec.packed.iter().enumerate() {
                            let base = (p.entry as usize - lo_entry) * f;
                            for c in 0..wide {
                                slice[base + c] += p.inc[c];
                            }
                            for c in 2..f {
                                slice[base + c] += rec.inc_overflow[r * (f - 2) + c - 2];
                            }
                        }
                    }
                });
            start = end;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_one(
        &self,
        x: &Vec3,
        d: f64,
        g: Option<Vec3>,
        shard_shift: u32,
        s: &mut EvalScratch,
        q: &mut [f64],
        p: &mut [f64],
        mlp: &mut MlpGrads,
        shards: &mut [ShardRecords],
    ) {
        let f = self.cfg.features_per_level;
        let in_dim = self.in_dim();
        let enc_w = self.cfg.encoded_width();
        if self.prepare(x, g.is_some(), s).is_err() {
            // Out-of-bound samples are culled upstream; skip defensively.
            return;
        }
        self.forward(s);
        let mut m = [0.0f64; HIDDEN];
        for j in 0..HIDDEN {
            if s.z[j] > 0.0 {
                m[j] = self.w2[j];
            }
        }
        if let Some(g) = g {
            self.input_adjoint(s, q);
            // p = (d input / d x) . g, the spatial adjoint pulled to the input.
            p.fill(0.0);
            for (l, layout) in self.layouts.iter().enumerate() {
                let cs = &s.corners[l];
                for b in 0..8 {
                    let dwg = cs.dweight[b][0] * g.x + cs.dweight[b][1] * g.y + cs.dweight[b][2] * g.z;
                    if dwg == 0.0 {
                        continue;
                    }
                    let base = (layout.offset + cs.idx[b] as usize) * f;
                    for c in 0..f {
                        p[l * f + c] += self.features[base + c] as f64 * dwg;
                    }
                }
            }
            p[enc_w] = g.x;
            p[enc_w + 1] = g.y;
            p[enc_w + 2] = g.z;

            let mut wp = [0.0f64; HIDDEN];
            for k in 0..in_dim {
                let rhs = d * s.enc[k] + p[k];
                let pk = p[k];
                let col: &[f64; HIDDEN] = self.w1[k * HIDDEN..(k + 1) * HIDDEN]
                    .try_into()
                    .unwrap();
                let gcol: &mut [f64; HIDDEN] = (&mut mlp.w1[k * HIDDEN..(k + 1) * HIDDEN])
                    .try_into()
                    .unwrap();
                for j in 0..HIDDEN {
                    gcol[j] += m[j] * rhs;
                    wp[j] += col[j] * pk;
                }
            }
            for j in 0..HIDDEN {
                if s.z[j] > 0.0 {
                    mlp.b1[j] += d * m[j];
                    mlp.w2[j] += d * s.z[j] + wp[j];
                }
            }
        } else {
            // Fused sweep over the weight columns: the input adjoint q and
            // the weight gradient share one traversal of w1.
            for k in 0..in_dim {
                let rhs = d * s.enc[k];
                let col: &[f64; HIDDEN] = self.w1[k * HIDDEN..(k + 1) * HIDDEN]
                    .try_into()
                    .unwrap();
                let gcol: &mut [f64; HIDDEN] = (&mut mlp.w1[k * HIDDEN..(k + 1) * HIDDEN])
                    .try_into()
                    .unwrap();
                let mut acc = 0.0;
                for j in 0..HIDDEN {
                    acc += col[j] * m[j];
                    gcol[j] += m[j] * rhs;
                }
                q[k] = acc;
            }
            for j in 0..HIDDEN {
                if s.z[j] > 0.0 {
                    mlp.b1[j] += d * m[j];
                    mlp.w2[j] += d * s.z[j];
                }
            }
        }
        mlp.b2 += d;

        for (l, layout) in self.layouts.iter().enumerate() {
            let cs = &s.corners[l];
            let qs = &q[l * f..(l + 1) * f];
            for b in 0..8 {
                let mut common = d * cs.weight[b];
                if let Some(g) = g {
                    common += cs.dweight[b][0] * g.x
                        + cs.dweight[b][1] * g.y
                        + cs.dweight[b][2] * g.z;
                }
                if common == 0.0 {
                    continue;
                }
                let entry = layout.offset + cs.idx[b] as usize;
                let rec = &mut shards[entry >> shard_shift];
                let mut inc = [0.0f32; 2];
                for (c, qv) in qs.iter().take(2).enumerate() {
                    inc[c] = (qv * common) as f32;
                }
                rec.packed.push(PackedRec {
                    entry: entry as u32,
                    inc,
                });
                for qv in qs.iter().skip(2) {
                    rec.inc_overflow.push((qv * common) as f32);
                }
            }
        }
    }
}

impl ScalarField for SdfField {
    fn value(&self, p: &Vec3) -> f64 {
        self.value_clamped(p)
    }
}

impl GradientField for SdfField {
    fn gradient(&self, p: &Vec3) -> Vec3 {
        self.analytic_spatial_gradient(p).unwrap_or_else(|_| Vec3::zeros())
    }
}

/// Handle for parameter backprop over a batch of evaluated positions.
pub struct SdfTape<'a> {
    field: &'a SdfField,
    positions: &'a [Vec3],
}

impl<'a> SdfTape<'a> {
    pub fn positions(&self) -> &[Vec3] {
        self.positions
    }

    /// d(sum_i adj_i * f(x_i)) / d(params), accumulated into `grads`.
    pub fn backward(&self, adj: &[f64], grads: &mut SdfGrads) {
        self.field.backward_batch(self.positions, adj, None, grads);
    }

    /// Adds the spatial-gradient path: d(sum_i g_i . grad f(x_i)) / d(params).
    pub fn backward_with_spatial(&self, adj: &[f64], grad_adj: &[Vec3], grads: &mut SdfGrads) {
        self.field
            .backward_batch(self.positions, adj, Some(grad_adj), grads);
    }
}

#[derive(Debug, Clone)]
pub struct SdfGrads {
    pub features: Vec<f32>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub sharpness_raw: f64,
}

impl SdfGrads {
    pub fn zeros_like(field: &SdfField) -> Self {
        SdfGrads {
            features: vec![0.0; field.features.len()],
            w1: vec![0.0; field.w1.len()],
            b1: vec![0.0; field.b1.len()],
            w2: vec![0.0; field.w2.len()],
            b2: 0.0,
            sharpness_raw: 0.0,
        }
    }

    pub fn clear(&mut self) {
        self.features.fill(0.0);
        self.w1.fill(0.0);
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2 = 0.0;
        self.sharpness_raw = 0.0;
    }
}

struct MlpGrads {
    w1: Vec<f64>,
    b1: [f64; HIDDEN],
    w2: [f64; HIDDEN],
    b2: f64,
}

impl MlpGrads {
    fn new(in_dim: usize) -> Self {
        MlpGrads {
            w1: vec![0.0; HIDDEN * in_dim],
            b1: [0.0; HIDDEN],
            w2: [0.0; HIDDEN],
            b2: 0.0,
        }
    }

    fn add_into(&self, grads: &mut SdfGrads) {
        for (g, l) in grads.w1.iter_mut().zip(self.w1.iter()) {
            *g += l;
        }
        for j in 0..HIDDEN {
            grads.b1[j] += self.b1[j];
            grads.w2[j] += self.w2[j];
        }
        grads.b2 += self.b2;
    }
}

/// One feature-gradient contribution: entry index plus the two feature
/// increments (the standard configuration has 2 features per level; wider
/// configurations spill extra increments into `inc_overflow` in order).
#[derive(Default)]
struct ShardRecords {
    packed: Vec<PackedRec>,
    inc_overflow: Vec<f32>,
}

#[derive(Clone, Copy)]
struct PackedRec {
    entry: u32,
    inc: [f32; 2],
}

impl ShardRecords {
    fn with_capacity(records: usize, features: usize) -> Self {
        ShardRecords {
            packed: Vec::with_capacity(records),
            inc_overflow: if features > 2 {
                Vec::with_capacity(records * (features - 2))
            } else {
                Vec::new()
            },
        }
    }
}

fn fibonacci_direction(i: usize, n: usize) -> Vec3 {
    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let phi = golden * i as f64;
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// --- checkpoint format ------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"NINTSDF1";
const CHECKPOINT_VERSION: u32 = 1;

impl SdfField {
    /// Binary checkpoint: versioned header, config block, then little-endian
    /// f32 parameter blobs in order (features level-major, w1 row-major, b1,
    /// w2, b2, sharpness_raw). Layout documented in FORMATS.md.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        for v in [
            self.cfg.levels as u32,
            self.cfg.features_per_level as u32,
            self.cfg.base_resolution,
            self.cfg.table_size_log2,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.write_all(&self.cfg.per_level_scale.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(&self.cfg.bound_radius.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        for v in [HIDDEN as u32, self.total_entries as u32] {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        let mut put = |vals: &mut dyn Iterator<Item = f32>| -> Result<()> {
            for v in vals {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        };
        put(&mut self.features.iter().copied())?;
        // On disk w1 is row-major (hidden-major).
        let in_dim = self.in_dim();
        put(&mut (0..HIDDEN).flat_map(|j| {
            (0..in_dim).map(move |k| k * HIDDEN + j)
        }).map(|idx| self.w1[idx] as f32))?;
        put(&mut self.b1.iter().map(|v| *v as f32))?;
        put(&mut self.w2.iter().map(|v| *v as f32))?;
        put(&mut [self.b2 as f32, self.sharpness_raw as f32].into_iter())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a field checkpoint (bad magic)"));
        }
        let mut u32buf = [0u8; 4];
        let mut f64buf = [0u8; 8];
        let mut read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32> {
            r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let levels = read_u32(&mut r)? as usize;
        let features_per_level = read_u32(&mut r)? as usize;
        let base_resolution = read_u32(&mut r)?;
        let table_size_log2 = read_u32(&mut r)?;
        let mut read_f64 = |r: &mut BufReader<std::fs::File>| -> Result<f64> {
            r.read_exact(&mut f64buf).map_err(|e| Error::io(path, e))?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let per_level_scale = read_f64(&mut r)?;
        let bound_radius = read_f64(&mut r)?;
        let hidden = read_u32(&mut r)? as usize;
        if hidden != HIDDEN {
            return Err(Error::format(path, format!("hidden width {hidden} unsupported")));
        }
        let total_claim = read_u32(&mut r)? as usize;
        let cfg = HashGridConfig {
            levels,
            features_per_level,
            base_resolution,
            per_level_scale,
            table_size_log2,
            bound_radius,
        };
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let (layouts, total_entries) = build_layout(&cfg);
        if total_entries != total_claim {
            return Err(Error::format(
                path,
                format!("entry count mismatch: header {total_claim}, layout {total_entries}"),
            ));
        }
        let in_dim = cfg.encoded_width() + 3;
        let mut read_f32s = |n: usize| -> Result<Vec<f32>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let features = read_f32s(total_entries * features_per_level)?;
        let w1_rows = read_f32s(HIDDEN * in_dim)?;
        let mut w1 = vec![0.0f64; HIDDEN * in_dim];
        for j in 0..HIDDEN {
            for k in 0..in_dim {
                w1[k * HIDDEN + j] = w1_rows[j * in_dim + k] as f64;
            }
        }
        let b1: Vec<f64> = read_f32s(HIDDEN)?.iter().map(|&v| v as f64).collect();
        let w2: Vec<f64> = read_f32s(HIDDEN)?.iter().map(|&v| v as f64).collect();
        let tail = read_f32s(2)?;
        Ok(SdfField {
            cfg,
            layouts,
            total_entries,
            features,
            w1,
            b1,
            w2,
            b2: tail[0] as f64,
            sharpness_raw: tail[1] as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> HashGridConfig {
        HashGridConfig::from_finest(4, 2, 8, 32, 10, 1.0)
    }

    fn test_field(seed: u64) -> SdfField {
        SdfField::geometric_init(small_cfg(), 0.7, 20.0, seed).unwrap()
    }

    /// A field with feature magnitudes large enough to dominate the MLP input.
    fn rich_field(seed: u64) -> SdfField {
        let mut field = test_field(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        for v in field.features.iter_mut() {
            *v = (rng.random::<f64>() * 0.4 - 0.2) as f32;
        }
        field
    }

    #[test]
    fn zero_features_encode_to_zero() {
        let mut field = test_field(1);
        field.features.fill(0.0);
        let enc = field.encode(&Vec3::new(0.31, -0.62, 0.05)).unwrap();
        assert!(enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_sample_reproduces_stored_feature() {
        let mut field = test_field(2);
        field.features.fill(0.0);
        // Level 0 has resolution 8 over [-1,1]: corner (2,3,4) sits at
        // u = (0.25, 0.375, 0.5) -> world (-0.5, -0.25, 0.0).
        let res = field.cfg.level_resolution(0);
        assert_eq!(res, 8);
        let s = res + 1;
        let corner_entry = ((2 * s + 3) * s + 4) as usize;
        let f = field.cfg.features_per_level;
        field.features[corner_entry * f] = 0.625;
        field.features[corner_entry * f + 1] = -0.125;
        let enc = field.encode(&Vec3::new(-0.5, -0.25, 0.0)).unwrap();
        assert!((enc[0] - 0.625).abs() < 1e-12);
        assert!((enc[1] + 0.125).abs() < 1e-12);
    }

    #[test]
    fn trilinear_reproduces_affine_functions() {
        // Fill every level's dense table with samples of g(x) = a.x + b.
        let cfg = HashGridConfig::from_finest(3, 2, 4, 16, 16, 1.0);
        let mut field = SdfField::geometric_init(cfg, 0.7, 20.0, 3).unwrap();
        let a = Vec3::new(0.3, -0.7, 0.45);
        let b = 0.2;
        let f = field.cfg.features_per_level;
        for (l, layout) in field.layouts.clone().iter().enumerate() {
            assert!(layout.dense, "test requires dense levels");
            let res = field.cfg.level_resolution(l);
            let s = res + 1;
            for cx in 0..s {
                for cy in 0..s {
                    for cz in 0..s {
                        let world = Vec3::new(
                            cx as f64 / res as f64 * 2.0 - 1.0,
                            cy as f64 / res as f64 * 2.0 - 1.0,
                            cz as f64 / res as f64 * 2.0 - 1.0,
                        );
                        let g = a.dot(&world) + b;
                        let e = (layout.offset + ((cx * s + cy) * s + cz) as usize) * f;
                        field.features[e] = g as f32;
                        field.features[e + 1] = (2.0 * g) as f32;
                    }
                }
            }
        }
        for p in [
            Vec3::new(0.13, -0.4, 0.77),
            Vec3::new(-0.9, 0.02, 0.5),
            Vec3::new(0.0, 0.0, 0.0),
        ] {
            let enc = field.encode(&p).unwrap();
            let g = a.dot(&p) + b;
            for l in 0..field.cfg.levels {
                // f32 storage quantizes the corner samples at ~1e-7.
                assert!((enc[l * f] - g).abs() < 1e-6, "level {l}: {} vs {g}", enc[l * f]);
                assert!((enc[l * f + 1] - 2.0 * g).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn geometric_init_approximates_sphere() {
        let field = SdfField::geometric_init(HashGridConfig::desk(), 0.7, 20.0, 7).unwrap();
        let f0 = field.sdf(&Vec3::zeros()).unwrap();
        assert!((f0 + 0.7).abs() < 0.1, "f(0) = {f0}");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut max_err: f64 = 0.0;
        for _ in 0..500 {
            let dir = Vec3::new(
                normal_sample(&mut rng),
                normal_sample(&mut rng),
                normal_sample(&mut rng),
            )
            .normalize();
            let r = 0.3 + 0.6 * rng.random::<f64>();
            let p = dir * r;
            let v = field.sdf(&p).unwrap();
            max_err = max_err.max((v - (r - 0.7)).abs());
        }
        assert!(max_err < 0.1, "max deviation from sphere SDF: {max_err}");
        // Zero level set near radius 0.7.
        let shell = field.sdf(&Vec3::new(0.7, 0.0, 0.0)).unwrap();
        assert!(shell.abs() < 0.1);
    }

    #[test]
    fn init_is_deterministic() {
        let a = test_field(42);
        let b = test_field(42);
        assert_eq!(a.features, b.features);
        assert_eq!(a.w1, b.w1);
        let p = Vec3::new(0.21, 0.52, -0.33);
        assert_eq!(a.sdf(&p).unwrap().to_bits(), b.sdf(&p).unwrap().to_bits());
    }

    #[test]
    fn batch_matches_single_and_permutes() {
        let field = rich_field(5);
        let xs = vec![
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(-0.5, 0.4, 0.0),
            Vec3::new(0.77, -0.1, -0.6),
        ];
        let (vals, _) = field.sdf_batch(&xs).unwrap();
        for (x, v) in xs.iter().zip(vals.iter()) {
            assert_eq!(field.sdf(x).unwrap().to_bits(), v.to_bits());
        }
        let perm = vec![xs[2], xs[0], xs[1]];
        let (pvals, _) = field.sdf_batch(&perm).unwrap();
        assert_eq!(pvals[0].to_bits(), vals[2].to_bits());
        assert_eq!(pvals[1].to_bits(), vals[0].to_bits());
    }

    #[test]
    fn out_of_bound_is_input_error() {
        let field = test_field(1);
        assert!(matches!(
            field.sdf(&Vec3::new(1.5, 0.0, 0.0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn nonfinite_parameter_is_internal_error() {
        let mut field = test_field(1);
        field.w2[10] = f64::NAN;
        assert!(matches!(
            field.sdf(&Vec3::zeros()),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let field = rich_field(11);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<Vec3> = (0..24)
            .map(|_| {
                Vec3::new(
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                )
            })
            .collect();
        let adj = vec![1.0; xs.len()];
        let mut grads = SdfGrads::zeros_like(&field);
        let (_, tape) = field.sdf_batch(&xs).unwrap();
        tape.backward(&adj, &mut grads);

        let sum_f = |fld: &SdfField| -> f64 { fld.values(&xs).unwrap().iter().sum() };

        // Feature entries with the largest recorded gradient.
        let mut order: Vec<usize> = (0..grads.features.len()).collect();
        order.sort_by(|&i, &j| {
            grads.features[j]
                .abs()
                .partial_cmp(&grads.features[i].abs())
                .unwrap()
        });
        let h = 1e-3;
        let mut checked = 0;
        let mut work = SdfField::geometric_init(small_cfg(), 0.7, 20.0, 11).unwrap();
        work.features.copy_from_slice(&field.features);
        work.w1.copy_from_slice(&field.w1);
        for &idx in order.iter().take(10) {
            let orig = work.features[idx];
            work.features[idx] = orig + h as f32;
            let up = sum_f(&work);
            work.features[idx] = orig - h as f32;
            let dn = sum_f(&work);
            work.features[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.features[idx] as f64;
            assert!(
                (fd - an).abs() <= 1e-2 * an.abs().max(1e-3),
                "feature {idx}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert_eq!(checked, 10);

        // A few MLP weights.
        for idx in [0usize, 33, HIDDEN * work.in_dim() - 1] {
            let orig = work.w1[idx];
            work.w1[idx] = orig + h;
            let up = sum_f(&work);
            work.w1[idx] = orig - h;
            let dn = sum_f(&work);
            work.w1[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.w1[idx];
            assert!(
                (fd - an).abs() <= 1e-2 * an.abs().max(1e-3),
                "w1[{idx}]: fd {fd} vs analytic {an}"
            );
        }
        let orig = work.b2;
        work.b2 = orig + h;
        let up = sum_f(&work);
        work.b2 = orig - h;
        let dn = sum_f(&work);
        work.b2 = orig;
        let fd = (up - dn) / (2.0 * h);
        assert!((fd - grads.b2).abs() < 1e-6 * grads.b2.abs().max(1.0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let field = rich_field(13);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 1e-4;
        let mut tested = 0;
        while tested < 30 {
            let p = Vec3::new(
                rng.random::<f64>() * 1.6 - 0.8,
                rng.random::<f64>() * 1.6 - 0.8,
                rng.random::<f64>() * 1.6 - 0.8,
            );
            // Keep the stencil away from every level's cell faces.
            let finest = field.cfg.level_resolution(field.cfg.levels - 1) as f64;
            let u = normalize_position(field.cfg(), &p).unwrap();
            let near_face = (0..field.cfg.levels).any(|l| {
                let res = field.cfg.level_resolution(l) as f64;
                u.iter().any(|&ui| {
                    let s = ui * res;
                    (s - s.round()).abs() < eps * finest
                })
            });
            if near_face {
                continue;
            }
            tested += 1;
            let g = field.analytic_spatial_gradient(&p).unwrap();
            for k in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[k] += eps;
                pm[k] -= eps;
                let fd = (field.sdf(&pp).unwrap() - field.sdf(&pm).unwrap()) / (2.0 * eps);
                let tol = 1e-3 * g[k].abs().max(1e-2);
                assert!((fd - g[k]).abs() < tol, "axis {k}: fd {fd} vs analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn zero_feature_gradient_uses_position_path_only() {
        let mut field = test_field(17);
        field.features.fill(0.0);
        let p = Vec3::new(0.3, -0.2, 0.5);
        let g = field.analytic_spatial_gradient(&p).unwrap();
        // Hand chain rule: grad = sum_j w2_j relu'(z_j) w1[j, position block].
        let mut s = EvalScratch::new(&field);
        field.prepare(&p, false, &mut s).unwrap();
        field.forward(&mut s);
        let enc_w = field.cfg.encoded_width();
        let mut expect = Vec3::zeros();
        for j in 0..HIDDEN {
            if s.z[j] > 0.0 {
                for k in 0..3 {
                    expect[k] += field.w2[j] * field.w1[(enc_w + k) * HIDDEN + j];
                }
            }
        }
        assert!((g - expect).norm() < 1e-12);
    }

    #[test]
    fn spatial_backward_matches_finite_differences() {
        // d(sum_i g_i . grad f(x_i))/d(params) against central differences.
        let field = rich_field(23);
        let xs = vec![Vec3::new(0.11, 0.21, -0.33), Vec3::new(-0.42, 0.05, 0.6)];
        let gs = vec![Vec3::new(0.5, -1.0, 0.25), Vec3::new(-0.3, 0.8, 1.1)];
        let mut grads = SdfGrads::zeros_like(&field);
        let (_, tape) = field.sdf_batch(&xs).unwrap();
        tape.backward_with_spatial(&[0.0, 0.0], &gs, &mut grads);

        let objective = |fld: &SdfField| -> f64 {
            xs.iter()
                .zip(gs.iter())
                .map(|(x, g)| fld.analytic_spatial_gradient(x).unwrap().dot(g))
                .sum()
        };
        let h = 1e-4;
        let mut work = rich_field(23);
        // Strongest feature gradients.
        let mut order: Vec<usize> = (0..grads.features.len()).collect();
        order.sort_by(|&i, &j| {
            grads.features[j]
                .abs()
                .partial_cmp(&grads.features[i].abs())
                .unwrap()
        });
        for &idx in order.iter().take(6) {
            let orig = work.features[idx];
            work.features[idx] = orig + h as f32;
            let up = objective(&work);
            work.features[idx] = orig - h as f32;
            let dn = objective(&work);
            work.features[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.features[idx] as f64;
            assert!(
                (fd - an).abs() <= 2e-2 * an.abs().max(1e-2),
                "feature {idx}: fd {fd} vs analytic {an}"
            );
        }
        for idx in [5usize, 40] {
            let orig = work.w1[idx];
            work.w1[idx] = orig + h;
            let up = objective(&work);
            work.w1[idx] = orig - h;
            let dn = objective(&work);
            work.w1[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.w1[idx];
            assert!(
                (fd - an).abs() <= 2e-2 * an.abs().max(1e-2),
                "w1[{idx}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let field = rich_field(31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        field.save(&path).unwrap();
        let loaded = SdfField::load(&path).unwrap();
        assert_eq!(loaded.cfg(), field.cfg());
        assert_eq!(loaded.features, field.features);
        // MLP weights survive as their f32 rounding.
        for (a, b) in field.w1.iter().zip(loaded.w1.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(field.b2 as f32, loaded.b2 as f32);
    }
}
