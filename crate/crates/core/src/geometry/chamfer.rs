//! Unidirectional surface Chamfer distance with a BVH-accelerated nearest-triangle query.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::camera::Similarity;
use super::linalg::{add, cross, dist2, dot, scale, sub, Vec3};
use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

pub fn point_triangle_dist2(p: Vec3, tri: &[Vec3; 3]) -> f64 {
    dist2(p, closest_point_on_triangle(p, tri[0], tri[1], tri[2]))
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow(&mut self, p: Vec3) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    fn dist2(&self, p: Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = if p[k] < self.lo[k] {
                self.lo[k] - p[k]
            } else if p[k] > self.hi[k] {
                p[k] - self.hi[k]
            } else {
                0.0
            };
            d += e * e;
        }
        d
    }
}

#[derive(Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over a mesh's triangles (median split on the
/// longest centroid axis).
#[derive(Debug)]
pub struct Bvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl Bvh {
    pub fn build(mesh: &Mesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::Mesh("nearest-triangle query on a mesh without faces".into()));
        }
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let mut bvh = Bvh {
            order: (0..tris.len()).collect(),
            tris,
            nodes: Vec::new(),
        };
        let n = bvh.tris.len();
        bvh.build_node(0, n);
        Ok(bvh)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &t in &self.order[start..end] {
            for v in &self.tris[t] {
                bounds.grow(*v);
            }
            cb.grow(centroid(&self.tris[t]));
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        let ext = sub(cb.hi, cb.lo);
        let axis = if ext[0] >= ext[1] && ext[0] >= ext[2] {
            0
        } else if ext[1] >= ext[2] {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        let tris = &self.tris;
        self.order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            centroid(&tris[*a])[axis]
                .total_cmp(&centroid(&tris[*b])[axis])
                .then(a.cmp(b))
        });
        self.nodes.push(Node::Leaf { bounds, start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    /// Squared distance from `p` to the nearest triangle.
    pub fn nearest_dist2(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            if self.nodes[n].bounds().dist2(p) > best {
                continue;
            }
            match &self.nodes[n] {
                Node::Leaf { start, end, .. } => {
                    for &t in &self.order[*start..*end] {
                        best = best.min(point_triangle_dist2(p, &self.tris[t]));
                    }
                }
                Node::Inner { left, right, .. } => {
                    let (dl, dr) = (self.nodes[*left].bounds().dist2(p), self.nodes[*right].bounds().dist2(p));
                    // visit the nearer child first
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best
    }
}

fn centroid(t: &[Vec3; 3]) -> Vec3 {
    scale(add(add(t[0], t[1]), t[2]), 1.0 / 3.0)
}

/// Exhaustive nearest-triangle scan (reference for the BVH).
pub fn nearest_dist2_exhaustive(mesh: &Mesh, p: Vec3) -> f64 {
    (0..mesh.faces.len())
        .map(|f| point_triangle_dist2(p, &mesh.triangle(f)))
        .fold(f64::INFINITY, f64::min)
}

/// Per-sample distances from `samples` points on `gt` to the surface of `pred`, in mesh units.
pub fn chamfer_samples(gt: &Mesh, pred: &Mesh, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::Invalid("Chamfer needs at least one sample".into()));
    }
    if pred.vertices.is_empty() || pred.faces.is_empty() {
        return Err(Error::Mesh("prediction mesh is empty".into()));
    }
    let bvh = Bvh::build(pred)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = gt.sample_surface(samples, &mut rng);
    Ok(pts.into_iter().map(|p| bvh.nearest_dist2(p).sqrt()).collect())
}

/// Mean ground-truth-to-prediction surface distance, in mesh units.
pub fn chamfer_unidirectional(gt: &Mesh, pred: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    let d = chamfer_samples(gt, pred, samples, seed)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Same as [`chamfer_unidirectional`] using the exhaustive scan.
pub fn chamfer_unidirectional_exhaustive(gt: &Mesh, pred: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Invalid("Chamfer needs at least one sample".into()));
    }
    if pred.vertices.is_empty() || pred.faces.is_empty() {
        return Err(Error::Mesh("prediction mesh is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = gt.sample_surface(samples, &mut rng);
    let s: f64 = pts.iter().map(|p| nearest_dist2_exhaustive(pred, *p).sqrt()).sum();
    Ok(s / samples as f64)
}

/// Chamfer distance converted back to the original millimetre frame.
pub fn chamfer_mm(gt: &Mesh, pred: &Mesh, samples: usize, seed: u64, normalization: &Similarity) -> Result<f64> {
    Ok(chamfer_unidirectional(gt, pred, samples, seed)? / normalization.scale)
}

/// Face normal (unnormalized) of a triangle.
pub fn face_normal(t: &[Vec3; 3]) -> Vec3 {
    cross(sub(t[1], t[0]), sub(t[2], t[0]))
}
