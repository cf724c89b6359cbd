//! Joint displacement learning of the keypoint and vertex branches.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_batch, batch_seed, epoch_order, inject_keypoint_noise, sample_queries, training_sample, TrainConfig};
use crate::descent::{Dropout, GlvdModel, HeadOutput};
use crate::error::{Error, Result};
use crate::geometry::{Scene, Vec3};
use crate::parallel::{derive_seed, map_indexed};
use crate::tensor::{Tape, Var};

/// Loss terms of one training example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLoss {
    pub total: f64,
    pub vertex: f64,
    pub keypoint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub vertex: f64,
    pub keypoint: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

/// Loss of one single-view example (`scene` already in its view's frame).
///
/// The vertex branch is encoded against noised ground-truth keypoints, never
/// against keypoint-branch predictions, so the two terms share no gradient
/// path other than the feature trunk.
pub fn glvd_scene_loss(model: &GlvdModel, scene: &Scene, cfg: &TrainConfig, seed: u64, tape: &mut Tape) -> Result<(Var, SceneLoss)> {
    let view = scene
        .views
        .first()
        .ok_or_else(|| Error::Invalid(format!("scene {} has no view", scene.identity_id)))?;
    let n = model.n_vertices();
    if scene.gt_mesh.vertices.len() != n {
        return Err(Error::Mesh(format!(
            "scene {} has {} vertices, the model {n}",
            scene.identity_id,
            scene.gt_mesh.vertices.len()
        )));
    }
    let queries = sample_queries(&scene.gt_mesh, cfg.queries_per_scene, derive_seed(seed, &[1]));
    let (out, targets): (HeadOutput, Vec<Vec3>) = if cfg.target_cap > 0 && cfg.target_cap < n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
        let mut ids = sample(&mut rng, n, cfg.target_cap).into_vec();
        ids.sort_unstable();
        let t = ids.iter().map(|i| scene.gt_mesh.vertices[*i]).collect();
        (HeadOutput::Targets(ids), t)
    } else {
        (HeadOutput::Full, scene.gt_mesh.vertices.clone())
    };
    let gt_kps: Vec<Vec3> = model.keypoint_ids.iter().map(|i| scene.gt_mesh.vertices[*i]).collect();
    let noisy = inject_keypoint_noise(&gt_kps, view, cfg.sigma_kp, derive_seed(seed, &[3]));
    let feats = model.encode_views(tape, std::slice::from_ref(view))?;
    let dropout = (cfg.dropout_p > 0.0).then(|| Dropout {
        p: cfg.dropout_p,
        seed: derive_seed(seed, &[4]),
    });
    let kind = cfg.loss_kind();
    let pred_v = model.vertex_head(tape, &feats, &queries.points, &noisy, &out, dropout)?;
    let lv = tape.displacement_loss(pred_v, queries.targets(&targets), kind)?;
    let (total, lk) = if model.has_keypoint_branch() {
        let pred_k = model.keypoint_head(tape, &feats, &queries.points, &HeadOutput::Full)?;
        let lk = tape.displacement_loss(pred_k, queries.targets(&gt_kps), kind)?;
        (tape.add(lv, lk)?, Some(lk))
    } else {
        (lv, None)
    };
    let loss = SceneLoss {
        total: tape.value(total).item(),
        vertex: tape.value(lv).item(),
        keypoint: lk.map_or(0.0, |v| tape.value(v).item()),
    };
    Ok((total, loss))
}

/// Train every trainable parameter of `model` for `cfg.total_epochs()`
/// epochs; the heatmap surrogate stays frozen. `progress` sees each epoch.
pub fn train_glvd(
    train: &[Scene],
    model: &mut GlvdModel,
    cfg: &TrainConfig,
    workers: usize,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    let seed = derive_seed(cfg.seed, &[0x61d]);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.total_epochs() {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(train.len(), seed, epoch);
        let (mut sum, mut sv, mut sk) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_scenes).enumerate() {
            let bseed = batch_seed(seed, epoch, b);
            let m: &GlvdModel = model;
            let results = map_indexed(batch.len(), workers, |slot| -> Result<(SceneLoss, Vec<Option<Vec<f64>>>)> {
                let sseed = derive_seed(bseed, &[slot as u64]);
                let sample = training_sample(&train[batch[slot]], cfg, sseed)?;
                let mut tape = Tape::new();
                let (loss, stats) = glvd_scene_loss(m, &sample, cfg, sseed, &mut tape)?;
                if !stats.total.is_finite() {
                    return Err(Error::NonFiniteLoss { seed: bseed });
                }
                let grads = tape.backward(loss)?;
                Ok((stats, m.store.collect_grads(&tape, &grads)))
            });
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (s, g) = r?;
                sum += s.total;
                sv += s.vertex;
                sk += s.keypoint;
                grads.push(g);
            }
            apply_batch(&mut model.store, grads, lr, bseed)?;
        }
        let n = train.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            lr,
            loss: sum / n,
            vertex: sv / n,
            keypoint: sk / n,
        };
        progress(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}
