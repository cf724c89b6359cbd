use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::dist2;
use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Fixed subset of template vertices used as guiding keypoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointSelection {
    pub vertex_indices: Vec<usize>,
}

impl KeypointSelection {
    pub fn k(&self) -> usize {
        self.vertex_indices.len()
    }

    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        let mut seen = vec![false; n_vertices];
        for &i in &self.vertex_indices {
            if i >= n_vertices {
                return Err(Error::Invalid(format!("keypoint index {i} out of range for {n_vertices} vertices")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invalid(format!("keypoint index {i} repeated")));
            }
        }
        Ok(())
    }
}

/// Farthest-point sampling anchored at a seed-chosen vertex.
///
/// The anchor only seeds the distance field: the first pick is the vertex
/// farthest from it, and each later pick maximizes the distance to all picks
/// so far. Ties go to the lowest index.
pub fn select_keypoints(template: &Mesh, k: usize, seed: u64) -> Result<KeypointSelection> {
    let n = template.vertices.len();
    if k > n {
        return Err(Error::Invalid(format!("cannot select {k} keypoints from {n} vertices")));
    }
    if k == 0 {
        return Ok(KeypointSelection { vertex_indices: vec![] });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = rng.random_range(0..n);
    let v = &template.vertices;
    let mut d: Vec<f64> = v.iter().map(|p| dist2(*p, v[anchor])).collect();
    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    for _ in 0..k {
        let mut best = usize::MAX;
        for i in 0..n {
            if !taken[i] && (best == usize::MAX || d[i] > d[best]) {
                best = i;
            }
        }
        taken[best] = true;
        picked.push(best);
        for i in 0..n {
            d[i] = if picked.len() == 1 {
                dist2(v[i], v[best])
            } else {
                d[i].min(dist2(v[i], v[best]))
            };
        }
    }
    Ok(KeypointSelection { vertex_indices: picked })
}
