use rand::Rng;

use super::linalg::{add, cross, norm, normalize, scale, sub, Vec3};
use crate::error::{Error, Result};

/// Triangle mesh on a fixed topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

/// FNV-1a (64-bit) over the face index stream, as lowercase hex.
pub fn topology_id(faces: &[[u32; 3]]) -> String {
    let mut h = crate::fingerprint::Fnv64::default();
    for f in faces {
        for idx in f {
            h.update(&idx.to_le_bytes());
        }
    }
    h.hex()
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let m = Mesh { vertices, faces };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::Mesh(format!("face {i} {f:?} indexes past {n} vertices")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Mesh(format!("face {i} {f:?} is degenerate")));
            }
        }
        if let Some(i) = self.vertices.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Mesh(format!("vertex {i} is not finite")));
        }
        Ok(())
    }

    pub fn topology_id(&self) -> String {
        topology_id(&self.faces)
    }

    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Mesh {
        debug_assert_eq!(vertices.len(), self.vertices.len());
        Mesh {
            vertices,
            faces: self.faces.clone(),
        }
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn face_areas(&self) -> Vec<f64> {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                0.5 * norm(cross(sub(b, a), sub(c, a)))
            })
            .collect()
    }

    pub fn surface_area(&self) -> f64 {
        self.face_areas().iter().sum()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![[0.0; 3]; self.vertices.len()];
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let fnrm = cross(sub(b, a), sub(c, a));
            for &i in &self.faces[f] {
                n[i as usize] = add(n[i as usize], fnrm);
            }
        }
        n.into_iter().map(normalize).collect()
    }

    /// Points drawn uniformly by area over the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec3> {
        let areas = self.face_areas();
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let r = rng.random::<f64>() * acc;
                let f = cdf.partition_point(|c| *c <= r).min(cdf.len() - 1);
                let [a, b, c] = self.triangle(f);
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let s = r1.sqrt();
                // barycentric (1 − s, s(1 − r2), s r2)
                add(add(scale(a, 1.0 - s), scale(b, s * (1.0 - r2))), scale(c, s * r2))
            })
            .collect()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len().max(1) as f64;
        let s = self.vertices.iter().fold([0.0; 3], |acc, v| add(acc, *v));
        scale(s, 1.0 / n)
    }
}
