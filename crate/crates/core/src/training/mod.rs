//! Training stages: the heatmap surrogate, SDF pretraining of f_v, and joint
//! displacement learning of the keypoint and vertex branches.
//!
//! Every stage trains on single views expressed in their camera-aligned
//! reference frame, the frame used for single-view reconstruction.

mod glvd;
mod heatmap;
mod sdf;

pub use glvd::{glvd_scene_loss, train_glvd, EpochStats, SceneLoss, TrainReport};
pub use heatmap::{
    heatmap_error_px, keypoint_pixels, load_heatmap_file, save_heatmap, train_heatmap, HeatmapReport, HEATMAP_FORMAT,
};
pub use sdf::{pretrain_sdf, sdf_validation, SdfEncoder, SdfReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Mesh, Scene, Vec3};
use crate::parallel::derive_seed;
use crate::synthdata::{augment, single_view_scene};
use crate::tensor::{AdamConfig, LossKind, ParamStore};

/// Half-width of the box that query points are kept in.
pub const QUERY_BOUND: f64 = 1.2;
/// Std of the jitter added to surface query samples.
pub const SURFACE_JITTER: f64 = 0.05;

/// Displacement objective used for both branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLoss {
    /// Cosine direction plus clipped magnitude difference.
    Directional,
    /// Squared error against targets clipped to `clip_train`.
    ClippedL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: TrainLoss,
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_train: f64,
    /// Keypoint-noise std in normalized units (3σ along camera depth).
    pub sigma_kp: f64,
    pub queries_per_scene: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub epochs_warm: usize,
    pub epochs_decay: usize,
    pub dropout_p: f64,
    pub seed: u64,
    /// Supervise this many random target vertices per scene (0 = all).
    pub target_cap: usize,
    /// Photometric and crop augmentation of training views.
    pub augment: bool,
    /// Views with a larger |yaw| are not used for training.
    pub max_train_yaw: f64,
    /// Train in the canonical scene frame instead of the camera frame.
    pub canonical_frame: bool,
    pub heatmap_epochs: usize,
    pub sdf_epochs: usize,
    pub sdf_surface_samples: usize,
    pub sdf_volume_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: TrainLoss::Directional,
            lambda1: 0.5,
            lambda2: 0.5,
            clip_train: 0.1,
            sigma_kp: 0.02,
            queries_per_scene: 1400,
            batch_scenes: 4,
            lr: 1e-3,
            epochs_warm: 50,
            epochs_decay: 200,
            dropout_p: 0.1,
            seed: 0,
            target_cap: 0,
            augment: true,
            max_train_yaw: 90.0,
            canonical_frame: false,
            heatmap_epochs: 40,
            sdf_epochs: 20,
            sdf_surface_samples: 1024,
            sdf_volume_samples: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return bad(format!("lambda1 + lambda2 must be positive, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.clip_train > 0.0 && self.clip_train <= 1.0) {
            return bad(format!("clip_train must lie in (0, 1], got {}", self.clip_train));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.sigma_kp >= 0.0) {
            return bad(format!("sigma_kp must be ≥ 0, got {}", self.sigma_kp));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("queries_per_scene", self.queries_per_scene),
            ("batch_scenes", self.batch_scenes),
            ("sdf_surface_samples", self.sdf_surface_samples),
            ("sdf_volume_samples", self.sdf_volume_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss {
            TrainLoss::Directional => LossKind::Directional {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                tau: self.clip_train,
            },
            TrainLoss::ClippedL2 => LossKind::ClippedL2 { tau: self.clip_train },
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_warm + self.epochs_decay
    }

    /// Constant for the warm epochs, then linear toward zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_warm {
            return self.lr;
        }
        let k = epoch - self.epochs_warm;
        if k >= self.epochs_decay {
            return 0.0;
        }
        self.lr * (1.0 - k as f64 / self.epochs_decay as f64)
    }
}

/// Query points with the ground-truth displacements toward a target set.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<Vec3>,
    /// Whether each point came from the surface branch of the sampler.
    pub from_surface: Vec<bool>,
}

impl QueryBatch {
    /// Flat `[M, 3T]` targets `v̂_j − x_i`.
    pub fn targets(&self, targets: &[Vec3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.points.len() * targets.len());
        for x in &self.points {
            for v in targets {
                out.extend_from_slice(&[v[0] - x[0], v[1] - x[1], v[2] - x[2]]);
            }
        }
        out
    }
}

/// Half uniform points in `[−1, 1]³`, half jittered area-uniform surface
/// samples (a fair coin per point), clamped to the query box.
pub fn sample_queries(mesh: &Mesh, m: usize, seed: u64) -> QueryBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, SURFACE_JITTER).expect("valid std");
    let from_surface: Vec<bool> = (0..m).map(|_| rng.random::<bool>()).collect();
    let n_surf = from_surface.iter().filter(|s| **s).count();
    let mut surf = mesh.sample_surface(n_surf, &mut rng).into_iter();
    let points = from_surface
        .iter()
        .map(|s| {
            if *s {
                let p = surf.next().expect("one sample per surface query");
                let q = [
                    p[0] + jitter.sample(&mut rng),
                    p[1] + jitter.sample(&mut rng),
                    p[2] + jitter.sample(&mut rng),
                ];
                q.map(|c| c.clamp(-QUERY_BOUND, QUERY_BOUND))
            } else {
                [
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ]
            }
        })
        .collect();
    QueryBatch { points, from_surface }
}

/// Ground-truth keypoints plus Gaussian noise with std `(σ, σ, 3σ)` along the
/// camera axes of `view`.
pub fn inject_keypoint_noise(keypoints: &[Vec3], view: &CameraView, sigma: f64, seed: u64) -> Vec<Vec3> {
    if sigma == 0.0 {
        return keypoints.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let r = &view.rotation;
    keypoints
        .iter()
        .map(|k| {
            let n = [
                sigma * normal.sample(&mut rng),
                sigma * normal.sample(&mut rng),
                3.0 * sigma * normal.sample(&mut rng),
            ];
            // camera → scene: Rᵀ n
            let d: Vec3 = std::array::from_fn(|c| r[0][c] * n[0] + r[1][c] * n[1] + r[2][c] * n[2]);
            [k[0] + d[0], k[1] + d[1], k[2] + d[2]]
        })
        .collect()
}

/// Indices of the views of `scene` eligible for training.
pub fn training_views(scene: &Scene, max_yaw: f64) -> Vec<usize> {
    (0..scene.views.len())
        .filter(|i| scene.views[*i].yaw_deg.abs() <= max_yaw + 1e-9)
        .collect()
}

/// One training example: a random eligible view, optionally augmented, with
/// the scene re-expressed in that view's reference frame (or kept canonical).
pub fn training_sample(scene: &Scene, cfg: &TrainConfig, seed: u64) -> Result<Scene> {
    let eligible = training_views(scene, cfg.max_train_yaw);
    if eligible.is_empty() {
        return Err(Error::Invalid(format!(
            "scene {} has no view within ±{}°",
            scene.identity_id, cfg.max_train_yaw
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = eligible[rng.random_range(0..eligible.len())];
    let mut s = if cfg.canonical_frame {
        Scene {
            views: vec![scene.views[idx].clone()],
            ..scene.clone()
        }
    } else {
        single_view_scene(scene, idx)?
    };
    if cfg.augment {
        s.views[0] = augment(&s.views[0], derive_seed(seed, &[1]));
    }
    Ok(s)
}

/// Seed of scene slot `slot` in batch `batch` of `epoch`.
pub fn batch_seed(base: u64, epoch: usize, batch: usize) -> u64 {
    derive_seed(base, &[epoch as u64, batch as u64])
}

/// Deterministic per-epoch visiting order of `n` scenes.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xe90c, epoch as u64])));
    order
}

/// Sum per-example gradients in order, average, and take one Adam step.
pub(crate) fn apply_batch(store: &mut ParamStore, grads: Vec<Vec<Option<Vec<f64>>>>, lr: f64, seed: u64) -> Result<()> {
    let n = grads.len().max(1) as f64;
    for g in &grads {
        store.add_grads(g);
    }
    store.scale_grads(1.0 / n);
    if !store.grads_finite() {
        store.zero_grads();
        return Err(Error::NonFiniteLoss { seed });
    }
    store.fill_missing_grads();
    store.step(&AdamConfig::with_lr(lr))
}
