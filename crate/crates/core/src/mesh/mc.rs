//! Marching cubes over the bound cube with linear edge interpolation.
//!
//! The per-configuration polygonization is generated once at startup instead
//! of shipping the classic literal tables: every cube face runs marching
//! squares with a fixed rule for the ambiguous diagonal case (inside corners
//! kept separated). Because the pairing depends only on the face's corner
//! signs, adjacent cells always agree and the extracted surface is closed.
//! Triangles are oriented outward using the field gradient afterwards.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::mesh::TriMesh;
use crate::Vec3;

/// Corner i sits at bit coords (i&1, i>>1&1, i>>2&1).
#[inline]
fn corner_bit(corner: usize, axis: usize) -> usize {
    corner >> axis & 1
}

/// The 12 cube edges as (corner_a, corner_b, axis), a's bit on `axis` = 0.
fn edge_list() -> [(usize, usize, usize); 12] {
    let mut edges = [(0usize, 0usize, 0usize); 12];
    let mut k = 0;
    for corner in 0..8 {
        for axis in 0..3 {
            if corner_bit(corner, axis) == 0 {
                edges[k] = (corner, corner | 1 << axis, axis);
                k += 1;
            }
        }
    }
    debug_assert_eq!(k, 12);
    edges
}

/// Marching squares on one cube face: pair the intersected face edges so
/// segments separate inside from outside. `edges` are the four cube-edge ids
/// of the face; returns pairs (each intersected edge appears exactly once).
fn face_pairs(config: u8, face_axis: usize, face_side: usize, edges: &[(usize, usize, usize); 12]) -> Vec<(usize, usize)> {
    // Face-local corner at (u,v) for the two non-normal axes.
    let axes: Vec<usize> = (0..3).filter(|&a| a != face_axis).collect();
    let (ua, va) = (axes[0], axes[1]);
    let corner_at = |u: usize, v: usize| -> usize { (face_side << face_axis) | (u << ua) | (v << va) };
    let inside = |c: usize| config >> c & 1 == 1;

    // The four face edges in face-local terms: (corner pair, id).
    let edge_id = |a: usize, b: usize| -> usize {
        edges
            .iter()
            .position(|&(x, y, _)| (x == a && y == b) || (x == b && y == a))
            .expect("cube edge")
    };
    let bottom = edge_id(corner_at(0, 0), corner_at(1, 0));
    let top = edge_id(corner_at(0, 1), corner_at(1, 1));
    let left = edge_id(corner_at(0, 0), corner_at(0, 1));
    let right = edge_id(corner_at(1, 0), corner_at(1, 1));

    let i00 = inside(corner_at(0, 0));
    let i10 = inside(corner_at(1, 0));
    let i01 = inside(corner_at(0, 1));
    let i11 = inside(corner_at(1, 1));

    let ms_case = (i00 as u8) | (i10 as u8) << 1 | (i01 as u8) << 2 | (i11 as u8) << 3;
    match ms_case {
        0b0000 | 0b1111 => vec![],
        // Single corner inside (or its complement): join its two edges.
        0b0001 | 0b1110 => vec![(bottom, left)],
        0b0010 | 0b1101 => vec![(bottom, right)],
        0b0100 | 0b1011 => vec![(left, top)],
        0b1000 | 0b0111 => vec![(right, top)],
        // Two adjacent corners inside: one crossing segment.
        0b0011 => vec![(left, right)],
        0b1100 => vec![(left, right)],
        0b0101 => vec![(bottom, top)],
        0b1010 => vec![(bottom, top)],
        // Diagonal (ambiguous): keep the inside corners separated.
        0b0110 => vec![(bottom, right), (left, top)],
        0b1001 => vec![(bottom, left), (right, top)],
        _ => unreachable!(),
    }
}

/// For one of the 256 sign configurations: the edge cycles forming the
/// isosurface polygons inside the cell.
fn build_case(config: u8) -> Vec<Vec<u8>> {
    if config == 0 || config == 0xff {
        return vec![];
    }
    let edges = edge_list();
    // Each intersected edge gets exactly two partners, one per adjacent face.
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for face_axis in 0..3 {
        for face_side in 0..2 {
            for (a, b) in face_pairs(config, face_axis, face_side, &edges) {
                partners[a].push(b);
                partners[b].push(a);
            }
        }
    }
    for (e, p) in partners.iter().enumerate() {
        let crossed = {
            let (a, b, _) = edges[e];
            (config >> a & 1) != (config >> b & 1)
        };
        debug_assert_eq!(
            p.len(),
            if crossed { 2 } else { 0 },
            "edge {e} of case {config:#04x}"
        );
    }

    let mut visited = [false; 12];
    let mut cycles = Vec::new();
    for start in 0..12 {
        if visited[start] || partners[start].is_empty() {
            continue;
        }
        let mut cycle = vec![start as u8];
        visited[start] = true;
        let mut prev = start;
        let mut cur = partners[start][0];
        while cur != start {
            visited[cur] = true;
            cycle.push(cur as u8);
            let next = if partners[cur][0] == prev {
                partners[cur][1]
            } else {
                partners[cur][0]
            };
            prev = cur;
            cur = next;
        }
        cycles.push(cycle);
    }
    cycles
}

fn cases() -> &'static [Vec<Vec<u8>>; 256] {
    static CASES: OnceLock<Box<[Vec<Vec<u8>>; 256]>> = OnceLock::new();
    CASES.get_or_init(|| {
        let mut v: Vec<Vec<Vec<u8>>> = Vec::with_capacity(256);
        for c in 0..256 {
            v.push(build_case(c as u8));
        }
        v.try_into().unwrap()
    })
}

/// Extract the iso-surface of `field` sampled on a `resolution`^3 cell grid
/// over the bound cube.
pub fn marching_cubes<F: ScalarField>(
    field: &F,
    resolution: u32,
    iso: f64,
    bound_radius: f64,
) -> Result<TriMesh> {
    if resolution < 8 {
        return Err(Error::invalid(format!(
            "marching cubes resolution must be at least 8, got {resolution}"
        )));
    }
    let n = resolution as usize;
    let corners = n + 1;
    let cell = 2.0 * bound_radius / resolution as f64;
    let coord = |i: usize| -bound_radius + i as f64 * cell;

    let plane_values = |z_idx: usize| -> Vec<f64> {
        (0..corners * corners)
            .into_par_iter()
            .map(|k| {
                let (ix, iy) = (k / corners, k % corners);
                field.value(&Vec3::new(coord(ix), coord(iy), coord(z_idx)))
            })
            .collect()
    };

    let edges = edge_list();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Shared vertices keyed by the global lower corner and axis of the edge.
    let mut vertex_cache: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();

    let mut lower = plane_values(0);
    for iz in 0..n {
        let upper = plane_values(iz + 1);
        let value_at = |ix: usize, iy: usize, dz: usize| -> f64 {
            let p = if dz == 0 { &lower } else { &upper };
            p[ix * corners + iy]
        };
        for ix in 0..n {
            for iy in 0..n {
                let mut config = 0u8;
                let mut vals = [0.0f64; 8];
                for c in 0..8 {
                    let v = value_at(ix + corner_bit(c, 0), iy + corner_bit(c, 1), corner_bit(c, 2));
                    vals[c] = v;
                    if v < iso {
                        config |= 1 << c;
                    }
                }
                let cycles = &cases()[config as usize];
                if cycles.is_empty() {
                    continue;
                }
                let mut edge_vertex = |e: usize,
                                       vertices: &mut Vec<Vec3>|
                 -> u32 {
                    let (a, b, axis) = edges[e];
                    let key = (
                        (ix + corner_bit(a, 0)) as u32,
                        (iy + corner_bit(a, 1)) as u32,
                        (iz + corner_bit(a, 2)) as u32,
                        axis as u8,
                    );
                    if let Some(&id) = vertex_cache.get(&key) {
                        return id;
                    }
                    let (fa, fb) = (vals[a], vals[b]);
                    let t = if (fa - fb).abs() < 1e-300 {
                        0.5
                    } else {
                        ((fa - iso) / (fa - fb)).clamp(0.0, 1.0)
                    };
                    let pa = Vec3::new(
                        coord(ix + corner_bit(a, 0)),
                        coord(iy + corner_bit(a, 1)),
                        coord(iz + corner_bit(a, 2)),
                    );
                    let mut p = pa;
                    p[axis] += t * cell;
                    let id = vertices.len() as u32;
                    vertices.push(p);
                    vertex_cache.insert(key, id);
                    id
                };
                for cycle in cycles {
                    let ids: Vec<u32> = cycle.iter().map(|&e| edge_vertex(e as usize, &mut vertices)).collect();
                    for k in 1..ids.len() - 1 {
                        triangles.push([ids[0], ids[k], ids[k + 1]]);
                    }
                }
            }
        }
        lower = upper;
    }

    // Orient triangles outward (toward growing field values) and drop
    // degenerate slivers.
    let h = cell * 0.5;
    let oriented: Vec<[u32; 3]> = triangles
        .par_iter()
        .filter_map(|t| {
            let (a, b, c) = (
                vertices[t[0] as usize],
                vertices[t[1] as usize],
                vertices[t[2] as usize],
            );
            let normal = (b - a).cross(&(c - a));
            let area2 = normal.norm();
            if area2 * 0.5 < 1e-12 {
                return None;
            }
            let centroid = (a + b + c) / 3.0;
            let n = normal / area2;
            let outward = field.value(&(centroid + h * n)) - field.value(&(centroid - h * n));
            if outward >= 0.0 {
                Some(*t)
            } else {
                Some([t[0], t[2], t[1]])
            }
        })
        .collect();

    Ok(TriMesh {
        vertices,
        triangles: oriented,
    })
}
