//! Training of the keypoint heatmap surrogate.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_batch, batch_seed, epoch_order, training_sample, TrainConfig};
use crate::config::ModelConfig;
use crate::encoder::{heatmap_argmax, heatmap_targets, input_planes, HeatmapNet};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraView, Scene, Vec3};
use crate::parallel::{derive_seed, map_indexed};
use crate::tensor::{read_tensor_file, write_tensor_file, ParamStore, Tape, Tensor, TensorFile};

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapReport {
    /// Mean training BCE per epoch.
    pub train_loss: Vec<f64>,
    /// Mean argmax error (image pixels) on validation views with |yaw| ≤ 45°.
    pub val_error_px: f64,
}

/// Image positions of the keypoint vertices of `mesh` in `view`; `None`
/// when behind the camera.
pub fn keypoint_pixels(mesh_vertices: &[Vec3], ids: &[usize], view: &CameraView) -> Vec<Option<[f64; 2]>> {
    ids.iter()
        .map(|i| {
            let p = project(mesh_vertices[*i], view);
            (!p.behind).then_some(p.pixel)
        })
        .collect()
}

/// Mean distance between heatmap peaks and projected keypoints over views
/// with |yaw| ≤ `max_yaw`, counting keypoints that land inside the image.
pub fn heatmap_error_px(
    net: &HeatmapNet,
    store: &ParamStore,
    scenes: &[Scene],
    ids: &[usize],
    max_yaw: f64,
    res: usize,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for s in scenes {
        for v in s.views.iter().filter(|v| v.yaw_deg.abs() <= max_yaw + 1e-9) {
            let set = net.predict(store, &input_planes(&v.image, &v.mask, res)?)?;
            let peaks = heatmap_argmax(&set, v.width());
            let (w, h) = (v.width() as f64, v.height() as f64);
            for (peak, gt) in peaks.iter().zip(keypoint_pixels(&s.gt_mesh.vertices, ids, v)) {
                let Some(gt) = gt else { continue };
                if !(0.0..w).contains(&gt[0]) || !(0.0..h).contains(&gt[1]) {
                    continue;
                }
                total += ((peak[0] - gt[0]).powi(2) + (peak[1] - gt[1]).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Invalid("no visible keypoints to score heatmaps on".into()));
    }
    Ok(total / count as f64)
}

/// Fit the surrogate with per-pixel binary cross-entropy against Gaussian
/// targets at the projected ground-truth keypoints.
pub fn train_heatmap(
    train: &[Scene],
    val: &[Scene],
    ids: &[usize],
    model: &ModelConfig,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(HeatmapNet, ParamStore, HeatmapReport)> {
    model.validate()?;
    cfg.validate()?;
    if ids.len() != model.num_keypoints {
        return Err(Error::Config(format!(
            "{} keypoints selected for num_keypoints = {}",
            ids.len(),
            model.num_keypoints
        )));
    }
    if train.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x4ea7]));
    let mut store = ParamStore::new();
    let net = HeatmapNet::new(&mut store, model, &mut rng);
    let res = model.feature_res;
    let seed = derive_seed(cfg.seed, &[0x4ea7, 1]);
    let mut train_loss = Vec::with_capacity(cfg.heatmap_epochs);
    for epoch in 0..cfg.heatmap_epochs {
        let order = epoch_order(train.len(), seed, epoch);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_scenes).enumerate() {
            let bseed = batch_seed(seed, epoch, b);
            let results = map_indexed(batch.len(), workers, |slot| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
                let sample = training_sample(&train[batch[slot]], cfg, derive_seed(bseed, &[slot as u64]))?;
                let view = &sample.views[0];
                let target = heatmap_targets(&keypoint_pixels(&sample.gt_mesh.vertices, ids, view), view.width(), res);
                let mut tape = Tape::new();
                let planes = tape.constant(input_planes(&view.image, &view.mask, res)?);
                let logits = net.logits(&mut tape, &store, planes)?;
                let loss = tape.bce_logits(logits, target)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), store.collect_grads(&tape, &grads)))
            });
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { seed: bseed });
                }
                sum += l;
                grads.push(g);
            }
            apply_batch(&mut store, grads, cfg.lr, bseed)?;
        }
        train_loss.push(sum / train.len() as f64);
    }
    let val_error_px = if val.is_empty() {
        f64::NAN
    } else {
        heatmap_error_px(&net, &store, val, ids, 45.0, res)?
    };
    store.freeze();
    Ok((net, store, HeatmapReport { train_loss, val_error_px }))
}

pub const HEATMAP_FORMAT: &str = "glvd-heatmap-v1";

#[derive(Serialize, Deserialize)]
struct HeatmapMeta {
    format: String,
    model: ModelConfig,
    keypoints: Vec<usize>,
}

/// Write a trained surrogate with the model settings and keypoint vertices
/// it was trained for.
pub fn save_heatmap(path: &Path, store: &ParamStore, model: &ModelConfig, ids: &[usize], fingerprint: &str) -> Result<()> {
    let mut file = TensorFile::new(fingerprint);
    file.meta = serde_json::to_value(HeatmapMeta {
        format: HEATMAP_FORMAT.into(),
        model: model.clone(),
        keypoints: ids.to_vec(),
    })?;
    file.tensors = store.named_tensors();
    write_tensor_file(path, &file)
}

/// Read a surrogate file: its keypoint vertices and tensors.
pub fn load_heatmap_file(path: &Path, fingerprint: Option<&str>) -> Result<(Vec<usize>, Vec<(String, Tensor)>)> {
    let file = read_tensor_file(path, fingerprint)?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let meta: HeatmapMeta = serde_json::from_value(file.meta).map_err(|e| corrupt(format!("heatmap header: {e}")))?;
    if meta.format != HEATMAP_FORMAT {
        return Err(corrupt(format!("format `{}` is not {HEATMAP_FORMAT}", meta.format)));
    }
    Ok((meta.keypoints, file.tensors))
}
