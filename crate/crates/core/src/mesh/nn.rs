//! Exact nearest-neighbor queries through a uniform grid with expanding
//! shell search.

use crate::Vec3;

pub struct NnGrid {
    points: Vec<Vec3>,
    cell_of: Vec<u32>,
    starts: Vec<u32>,
    order: Vec<u32>,
    min: Vec3,
    inv_cell: f64,
    cell: f64,
    dims: [usize; 3],
}

impl NnGrid {
    pub fn build(points: &[Vec3]) -> Self {
        assert!(!points.is_empty());
        let mut min = Vec3::from_element(f64::INFINITY);
        let mut max = Vec3::from_element(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).amax().max(1e-12);
        // Aim for a few points per cell.
        let target = (points.len() as f64 / 4.0).cbrt().ceil().max(1.0) as usize;
        let cell = extent / target as f64;
        let dims = [0, 1, 2].map(|k| {
            (((max[k] - min[k]) / cell).floor() as usize + 1).max(1)
        });
        let n_cells = dims[0] * dims[1] * dims[2];
        let clamp_idx = |v: f64, k: usize| -> usize {
            (((v - min[k]) / cell).floor() as i64).clamp(0, dims[k] as i64 - 1) as usize
        };
        let cell_of: Vec<u32> = points
            .iter()
            .map(|p| {
                let (i, j, l) = (clamp_idx(p.x, 0), clamp_idx(p.y, 1), clamp_idx(p.z, 2));
                ((i * dims[1] + j) * dims[2] + l) as u32
            })
            .collect();
        // Counting sort into per-cell buckets.
        let mut counts = vec![0u32; n_cells + 1];
        for &c in &cell_of {
            counts[c as usize + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut cursor = counts;
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[cursor[c as usize] as usize] = i as u32;
            cursor[c as usize] += 1;
        }
        NnGrid {
            points: points.to_vec(),
            cell_of,
            starts,
            order,
            min,
            inv_cell: 1.0 / cell,
            cell,
            dims,
        }
    }

    /// Index and distance of the exact nearest point to `q`.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let idx = |v: f64, k: usize| -> i64 {
            (((v - self.min[k]) * self.inv_cell).floor() as i64).clamp(0, self.dims[k] as i64 - 1)
        };
        let (ci, cj, cl) = (idx(q.x, 0), idx(q.y, 1), idx(q.z, 2));
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        for ring in 0..=max_ring {
            // Once the closest possible point of this ring exceeds the best
            // distance, the search is complete.
            if best.1.is_finite() {
                let ring_min = (ring as f64 - 1.0).max(0.0) * self.cell;
                if ring_min > best.1 {
                    break;
                }
            }
            let mut any_cell = false;
            for di in -ring..=ring {
                for dj in -ring..=ring {
                    for dl in -ring..=ring {
                        if di.abs().max(dj.abs()).max(dl.abs()) != ring {
                            continue; // shell only
                        }
                        let (i, j, l) = (ci + di, cj + dj, cl + dl);
                        if i < 0
                            || j < 0
                            || l < 0
                            || i >= self.dims[0] as i64
                            || j >= self.dims[1] as i64
                            || l >= self.dims[2] as i64
                        {
                            continue;
                        }
                        any_cell = true;
                        let c = ((i as usize * self.dims[1] + j as usize) * self.dims[2]
                            + l as usize) as u32;
                        let (s, e) = (
                            self.starts[c as usize] as usize,
                            self.starts[c as usize + 1] as usize,
                        );
                        for &pi in &self.order[s..e] {
                            let d = (self.points[pi as usize] - q).norm();
                            if d < best.1 {
                                best = (pi as usize, d);
                            }
                        }
                    }
                }
            }
            if !any_cell && best.1.is_finite() {
                break;
            }
        }
        debug_assert!(best.0 != usize::MAX);
        best
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[allow(dead_code)]
    fn cell_count(&self) -> usize {
        self.cell_of.len()
    }
}
