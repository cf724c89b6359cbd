//! Guided learned vertex descent: the keypoint and vertex branches, their
//! encodings, multi-view aggregation, clipping and the inference loop.
//!
//! Views passed to [`run_descent`] must already be expressed in the
//! reference frame of the reconstruction: the camera frame of the input view
//! for single-view runs (see [`crate::synthdata::single_view_scene`]), the
//! calibrated scene frame otherwise.

mod encoding;
mod model;

pub use encoding::{distance_encoding, relative_encoding, repeated_keypoints};
pub use model::{Dropout, GlvdModel, HeadOutput, ViewFeatures, MODEL_FORMAT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Mesh, Vec3};
use crate::tensor::Tape;

/// Allowed range of the inference clipping radius.
pub const CLIP_RANGE: (f64, f64) = (0.05, 0.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateScheme {
    /// Keypoints and vertices step from the same state.
    Iterative,
    /// Keypoints step first; vertices are re-encoded against them.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentConfig {
    pub steps: usize,
    pub clip_infer: f64,
    pub update_scheme: UpdateScheme,
    /// Leading views of the fixed view order consumed per scene.
    pub views_used: usize,
    /// Seed of the keypoint initialization.
    pub seed: u64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            steps: 10,
            clip_infer: 0.1,
            update_scheme: UpdateScheme::Iterative,
            views_used: 1,
            seed: 0,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(CLIP_RANGE.0..=CLIP_RANGE.1).contains(&self.clip_infer) {
            return Err(Error::Config(format!(
                "clip_infer must lie in [{}, {}], got {}",
                CLIP_RANGE.0, CLIP_RANGE.1, self.clip_infer
            )));
        }
        if self.views_used == 0 {
            return Err(Error::Config("views_used must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Scale `d` down to length `max` when longer; the direction is unchanged.
pub fn clip_displacement(d: Vec3, max: f64) -> Vec3 {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if n > max {
        let s = max / n;
        [d[0] * s, d[1] * s, d[2] * s]
    } else {
        d
    }
}

/// Keypoints drawn uniformly from `[−1, 1]³`.
pub fn initial_keypoints(k: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentState {
    pub vertices: Vec<Vec3>,
    pub keypoints: Vec<Vec3>,
    pub iteration: usize,
}

#[derive(Clone, Debug)]
pub struct DescentResult {
    pub mesh: Mesh,
    /// States `0..=steps`.
    pub history: Vec<DescentState>,
}

fn rows3(tape: &Tape, v: crate::tensor::Var) -> Vec<Vec3> {
    tape.value(v).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn apply(points: &mut [Vec3], deltas: &[Vec3], clip: f64) {
    for (p, d) in points.iter_mut().zip(deltas) {
        let d = clip_displacement(*d, clip);
        for c in 0..3 {
            p[c] += d[c];
        }
    }
}

/// Clipped keypoint displacements from the current keypoint estimates.
pub fn keypoint_step(model: &GlvdModel, tape: &mut Tape, feats: &[ViewFeatures], keypoints: &[Vec3], clip: f64) -> Result<Vec<Vec3>> {
    let out = model.keypoint_head(tape, feats, keypoints, &HeadOutput::Diagonal)?;
    Ok(rows3(tape, out).into_iter().map(|d| clip_displacement(d, clip)).collect())
}

/// Clipped vertex displacements from the current state.
pub fn vertex_step(
    model: &GlvdModel,
    tape: &mut Tape,
    feats: &[ViewFeatures],
    vertices: &[Vec3],
    keypoints: &[Vec3],
    clip: f64,
) -> Result<Vec<Vec3>> {
    let out = model.vertex_head(tape, feats, vertices, keypoints, &HeadOutput::Diagonal, None)?;
    Ok(rows3(tape, out).into_iter().map(|d| clip_displacement(d, clip)).collect())
}

/// Reconstruct from the first `cfg.views_used` of `views`.
pub fn run_descent(model: &GlvdModel, views: &[CameraView], cfg: &DescentConfig) -> Result<DescentResult> {
    cfg.validate()?;
    if views.len() < cfg.views_used {
        return Err(Error::Invalid(format!(
            "{} views requested but only {} supplied",
            cfg.views_used,
            views.len()
        )));
    }
    let mut tape = Tape::new();
    let feats = model.encode_views(&mut tape, &views[..cfg.views_used])?;
    let mut state = DescentState {
        vertices: model.template.vertices.clone(),
        keypoints: initial_keypoints(model.num_keypoints(), cfg.seed),
        iteration: 0,
    };
    let mut history = vec![state.clone()];
    let guided = model.has_keypoint_branch();
    for t in 1..=cfg.steps {
        // per-step nodes are discarded; the encoded views stay on the tape
        let mark = tape.len();
        let mut next = state.clone();
        if guided {
            let dk = keypoint_step(model, &mut tape, &feats, &state.keypoints, cfg.clip_infer)?;
            apply(&mut next.keypoints, &dk, f64::INFINITY);
        }
        let kps = match cfg.update_scheme {
            UpdateScheme::Iterative => &state.keypoints,
            UpdateScheme::Sequential => &next.keypoints,
        };
        let dv = vertex_step(model, &mut tape, &feats, &state.vertices, kps, cfg.clip_infer)?;
        apply(&mut next.vertices, &dv, f64::INFINITY);
        tape.truncate(mark);
        next.iteration = t;
        history.push(next.clone());
        state = next;
    }
    Ok(DescentResult {
        mesh: model.template.with_vertices(state.vertices),
        history,
    })
}
