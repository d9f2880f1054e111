//! Median-split BVH with Woop-style watertight ray-triangle intersection,
//! first-hit semantics.

use crate::geometry::Ray;
use crate::mesh::TriMesh;
use crate::Vec3;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Vec3::from_element(f64::INFINITY),
            max: Vec3::from_element(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    /// Slab test returning the entry distance, if the interval intersects.
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 1e-12f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug)]
struct Node {
    aabb: Aabb,
    /// Leaf (count > 0): `first` indexes into `order`.
    /// Inner (count = 0): `first`/`right` are the child node ids.
    first: u32,
    right: u32,
    count: u32,
}

pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    triangles: Vec<[Vec3; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle: u32,
    pub point: Vec3,
}

const LEAF_SIZE: usize = 4;
/// First-hit bias: intersections closer than this are ignored.
pub const T_BIAS: f64 = 1e-6;

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let triangles: Vec<[Vec3; 3]> = mesh
            .triangles
            .iter()
            .map(|t| {
                [
                    mesh.vertices[t[0] as usize],
                    mesh.vertices[t[1] as usize],
                    mesh.vertices[t[2] as usize],
                ]
            })
            .collect();
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| (t[0] + t[1] + t[2]) / 3.0)
            .collect();
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes = Vec::new();
        if !triangles.is_empty() {
            build_node(&triangles, &centroids, &mut order, 0, &mut nodes);
        }
        Bvh {
            nodes,
            order,
            triangles,
        }
    }

    /// Closest intersection with t > T_BIAS.
    pub fn first_hit(&self, ray: &Ray) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv_dir = Vec3::new(
            1.0 / ray.direction.x,
            1.0 / ray.direction.y,
            1.0 / ray.direction.z,
        );
        let pre = WatertightPre::new(&ray.direction);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            let t_max = best.map_or(f64::INFINITY, |h| h.t);
            if node.aabb.hit(&ray.origin, &inv_dir, t_max).is_none() {
                continue;
            }
            if node.count > 0 {
                for k in node.first..node.first + node.count {
                    let tri_id = self.order[k as usize];
                    let tri = &self.triangles[tri_id as usize];
                    if let Some(t) = pre.intersect(&ray.origin, tri) {
                        if t > T_BIAS && best.map_or(true, |h| t < h.t) {
                            best = Some(Hit {
                                t,
                                triangle: tri_id,
                                point: ray.at(t),
                            });
                        }
                    }
                }
            } else {
                // Visit the nearer child first.
                let (l, r) = (node.first, node.right);
                let dl = self.nodes[l as usize].aabb.hit(&ray.origin, &inv_dir, t_max);
                let dr = self.nodes[r as usize].aabb.hit(&ray.origin, &inv_dir, t_max);
                match (dl, dr) {
                    (Some(a), Some(b)) => {
                        if a <= b {
                            stack.push(r);
                            stack.push(l);
                        } else {
                            stack.push(l);
                            stack.push(r);
                        }
                    }
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        best
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }
}

fn build_node(
    triangles: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    offset: u32,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut aabb = Aabb::empty();
    for &t in order.iter() {
        for v in &triangles[t as usize] {
            aabb.grow(v);
        }
    }
    let node_id = nodes.len() as u32;
    nodes.push(Node {
        aabb,
        first: offset,
        right: 0,
        count: order.len() as u32,
    });
    if order.len() <= LEAF_SIZE {
        return node_id;
    }
    // Median split on the longest centroid axis.
    let mut cb = Aabb::empty();
    for &t in order.iter() {
        cb.grow(&centroids[t as usize]);
    }
    let ext = cb.max - cb.min;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    if ext[axis] <= 0.0 {
        return node_id; // degenerate cluster stays a leaf
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .partial_cmp(&centroids[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let (left, right) = order.split_at_mut(mid);
    let left_id = build_node(triangles, centroids, left, offset, nodes);
    let right_id = build_node(triangles, centroids, right, offset + mid as u32, nodes);
    let mut merged = nodes[left_id as usize].aabb;
    merged.merge(&nodes[right_id as usize].aabb);
    nodes[node_id as usize] = Node {
        aabb: merged,
        first: left_id,
        right: right_id,
        count: 0,
    };
    node_id
}

/// Watertight ray-triangle precomputation (shear to ray space; edge tests
/// share exact pairwise products, so shared edges cannot leak rays).
struct WatertightPre {
    kx: usize,
    ky: usize,
    kz: usize,
    sx: f64,
    sy: f64,
    sz: f64,
}

impl WatertightPre {
    fn new(dir: &Vec3) -> Self {
        let ax = dir.x.abs();
        let ay = dir.y.abs();
        let az = dir.z.abs();
        let kz = if az >= ax && az >= ay {
            2
        } else if ay >= ax {
            1
        } else {
            0
        };
        let mut kx = (kz + 1) % 3;
        let mut ky = (kz + 2) % 3;
        if dir[kz] < 0.0 {
            std::mem::swap(&mut kx, &mut ky);
        }
        WatertightPre {
            kx,
            ky,
            kz,
            sx: dir[kx] / dir[kz],
            sy: dir[ky] / dir[kz],
            sz: 1.0 / dir[kz],
        }
    }

    fn intersect(&self, origin: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
        let a = tri[0] - origin;
        let b = tri[1] - origin;
        let c = tri[2] - origin;
        let ax = a[self.kx] - self.sx * a[self.kz];
        let ay = a[self.ky] - self.sy * a[self.kz];
        let bx = b[self.kx] - self.sx * b[self.kz];
        let by = b[self.ky] - self.sy * b[self.kz];
        let cx = c[self.kx] - self.sx * c[self.kz];
        let cy = c[self.ky] - self.sy * c[self.kz];
        let u = cx * by - cy * bx;
        let v = ax * cy - ay * cx;
        let w = bx * ay - by * ax;
        if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
            return None;
        }
        let det = u + v + w;
        if det == 0.0 {
            return None;
        }
        let az = self.sz * a[self.kz];
        let bz = self.sz * b[self.kz];
        let cz = self.sz * c[self.kz];
        let t = (u * az + v * bz + w * cz) / det;
        if t > 0.0 {
            Some(t)
        } else {
            None
        }
    }
}
