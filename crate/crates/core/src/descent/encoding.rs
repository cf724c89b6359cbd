//! Keypoint payloads of the vertex branch, as flat row-major arrays.

use crate::geometry::Vec3;

/// `[P, 3K]`: row `p`, block `j` is `k_j − x_p`.
pub fn relative_encoding(queries: &[Vec3], keypoints: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * queries.len() * keypoints.len());
    for x in queries {
        for k in keypoints {
            out.extend_from_slice(&[k[0] - x[0], k[1] - x[1], k[2] - x[2]]);
        }
    }
    out
}

/// `[P, 3K]`: the raw keypoint coordinates on every row.
pub fn repeated_keypoints(queries: usize, keypoints: &[Vec3]) -> Vec<f64> {
    let row: Vec<f64> = keypoints.iter().flatten().copied().collect();
    row.repeat(queries)
}

/// `[P, K]`: `‖k_j − x_p‖`.
pub fn distance_encoding(queries: &[Vec3], keypoints: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(queries.len() * keypoints.len());
    for x in queries {
        for k in keypoints {
            let d = [k[0] - x[0], k[1] - x[1], k[2] - x[2]];
            out.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
        }
    }
    out
}
