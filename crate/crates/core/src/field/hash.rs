//! Multi-resolution hash-grid feature encoding.
//!
//! Space is the cube [-bound, bound]^3 discretized into `levels` grids whose
//! resolutions grow geometrically. Levels coarse enough that every corner
//! fits in the table are stored densely; finer levels index corners through
//! the classic 3-prime XOR spatial hash. A sample's encoding is the
//! concatenation over levels of trilinearly interpolated corner features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

const HASH_P2: u32 = 2_654_435_761;
const HASH_P3: u32 = 805_459_861;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub per_level_scale: f64,
    pub table_size_log2: u32,
    pub bound_radius: f64,
}

impl HashGridConfig {
    /// Paper-scale defaults: 14 levels x 2 features (28-dim encoding),
    /// base 16, finest 2048, 2^19-entry tables, unit-sphere bound.
    pub fn standard() -> Self {
        Self::from_finest(14, 2, 16, 2048, 19, 1.0)
    }

    /// Same shape as `standard` but sized for CPU runs: finest 256, 2^16 tables.
    pub fn desk() -> Self {
        Self::from_finest(14, 2, 16, 256, 16, 1.0)
    }

    /// Derive `per_level_scale` so the last level lands on `finest` cells.
    pub fn from_finest(
        levels: usize,
        features_per_level: usize,
        base_resolution: u32,
        finest_resolution: u32,
        table_size_log2: u32,
        bound_radius: f64,
    ) -> Self {
        let scale = if levels > 1 {
            ((finest_resolution as f64 / base_resolution as f64).ln() / (levels as f64 - 1.0)).exp()
        } else {
            2.0
        };
        HashGridConfig {
            levels,
            features_per_level,
            base_resolution,
            per_level_scale: scale,
            table_size_log2,
            bound_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::invalid("hash grid needs at least one level and one feature"));
        }
        if self.per_level_scale <= 1.0 {
            return Err(Error::invalid(format!(
                "per_level_scale must exceed 1, got {}",
                self.per_level_scale
            )));
        }
        if self.bound_radius <= 0.0 {
            return Err(Error::invalid("bound_radius must be positive"));
        }
        if self.base_resolution < 2 {
            return Err(Error::invalid("base_resolution must be at least 2"));
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 24 {
            return Err(Error::invalid("table_size_log2 must be in 1..=24"));
        }
        Ok(())
    }

    /// Width of the encoded feature vector (levels x features, x excluded).
    pub fn encoded_width(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        let r = self.base_resolution as f64 * self.per_level_scale.powi(level as i32);
        r.round() as u32
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LevelLayout {
    pub resolution: u32,
    pub dense: bool,
    /// Offset into the feature storage in entry units (multiply by F).
    pub offset: usize,
    pub entries: usize,
}

/// Per-level storage layout plus the total entry count.
pub(crate) fn build_layout(cfg: &HashGridConfig) -> (Vec<LevelLayout>, usize) {
    let table = cfg.table_size();
    let mut layouts = Vec::with_capacity(cfg.levels);
    let mut offset = 0usize;
    for l in 0..cfg.levels {
        let res = cfg.level_resolution(l);
        let corners = (res as usize + 1).pow(3);
        let (dense, entries) = if corners <= table {
            (true, corners)
        } else {
            (false, table)
        };
        layouts.push(LevelLayout {
            resolution: res,
            dense,
            offset,
            entries,
        });
        offset += entries;
    }
    (layouts, offset)
}

/// Map a world position into normalized cube coordinates in [0,1]^3.
pub(crate) fn normalize_position(cfg: &HashGridConfig, x: &Vec3) -> Result<[f64; 3]> {
    let b = cfg.bound_radius;
    let mut u = [0.0f64; 3];
    for k in 0..3 {
        let c = x[k];
        if !(c >= -b && c <= b) {
            return Err(Error::invalid(format!(
                "position {:?} outside the [-{b}, {b}]^3 bound",
                (x.x, x.y, x.z)
            )));
        }
        u[k] = (c + b) / (2.0 * b);
    }
    Ok(u)
}

/// Everything needed to read (and differentiate) one level at one sample:
/// the 8 corner entry indices, trilinear weights, and weight gradients in
/// world units.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CornerSet {
    pub idx: [u32; 8],
    pub weight: [f64; 8],
    pub dweight: [[f64; 3]; 8],
}

#[inline]
fn hash3(c: [u32; 3], mask: u32) -> u32 {
    (c[0] ^ c[1].wrapping_mul(HASH_P2) ^ c[2].wrapping_mul(HASH_P3)) & mask
}

#[inline]
fn dense_index(c: [u32; 3], res: u32) -> u32 {
    let s = res + 1;
    (c[0] * s + c[1]) * s + c[2]
}

/// Split a scaled coordinate into (cell, fraction) with exact-face ties
/// resolved toward the lower-index cell.
#[inline]
fn cell_split(scaled: f64, res: u32) -> (u32, f64) {
    let mut cell = scaled.floor();
    let mut frac = scaled - cell;
    if frac == 0.0 && cell > 0.0 {
        cell -= 1.0;
        frac = 1.0;
    }
    let cell = (cell as u32).min(res - 1);
    (cell, frac)
}

pub(crate) fn corner_set(
    layout: &LevelLayout,
    u: &[f64; 3],
    inv_extent: f64,
    with_grad: bool,
) -> CornerSet {
    let res = layout.resolution;
    let mut cell = [0u32; 3];
    let mut frac = [0f64; 3];
    for k in 0..3 {
        let (c, f) = cell_split(u[k] * res as f64, res);
        cell[k] = c;
        frac[k] = f;
    }
    // d(scaled)/d(world) for weight gradients.
    let dscale = res as f64 * inv_extent;

    let w = [
        [1.0 - frac[0], frac[0]],
        [1.0 - frac[1], frac[1]],
        [1.0 - frac[2], frac[2]],
    ];
    let mut out = CornerSet {
        idx: [0; 8],
        weight: [0.0; 8],
        dweight: [[0.0; 3]; 8],
    };
    let mask = (layout.entries as u32).wrapping_sub(1);
    for b in 0..8usize {
        let bx = b >> 2 & 1;
        let by = b >> 1 & 1;
        let bz = b & 1;
        let corner = [cell[0] + bx as u32, cell[1] + by as u32, cell[2] + bz as u32];
        out.idx[b] = if layout.dense {
            dense_index(corner, res)
        } else {
            hash3(corner, mask)
        };
        out.weight[b] = w[0][bx] * w[1][by] * w[2][bz];
        if with_grad {
            let sx = if bx == 1 { 1.0 } else { -1.0 };
            let sy = if by == 1 { 1.0 } else { -1.0 };
            let sz = if bz == 1 { 1.0 } else { -1.0 };
            out.dweight[b] = [
                sx * w[1][by] * w[2][bz] * dscale,
                sy * w[0][bx] * w[2][bz] * dscale,
                sz * w[0][bx] * w[1][by] * dscale,
            ];
        }
    }
    out
}
