use serde::{Deserialize, Serialize};

use super::report::{summarize, Summary};
use super::{score_mesh, EvalConfig, Evaluator};
use crate::descent::{run_descent, DescentConfig};
use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::parallel::map_indexed;
use crate::synthdata::{render_view, single_view_scene, RenderConfig};
use crate::training::heatmap_error_px;

pub const YAW_BUCKETS: [f64; 3] = [0.0, 45.0, 90.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YawBucket {
    pub yaw_deg: f64,
    pub per_scene_mm: Vec<f64>,
    /// Mean heatmap-surrogate argmax error in image pixels; `None` without a surrogate.
    pub heatmap_error_px: Option<f64>,
}

impl YawBucket {
    pub fn summary(&self) -> Summary {
        summarize(&self.per_scene_mm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YawReport {
    pub corpus_fingerprint: String,
    pub checkpoint_fingerprint: String,
    pub scene_ids: Vec<String>,
    pub buckets: Vec<YawBucket>,
}

impl YawReport {
    pub fn bucket(&self, yaw: f64) -> Option<&YawBucket> {
        self.buckets.iter().find(|b| b.yaw_deg == yaw)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["yaw_deg", "mean_mm", "median_mm", "std_mm", "n", "heatmap_error_px"])?;
        for b in &self.buckets {
            let s = b.summary();
            w.write_record([
                b.yaw_deg.to_string(),
                s.mean.to_string(),
                s.median.to_string(),
                s.std.to_string(),
                s.n.to_string(),
                b.heatmap_error_px.map_or(String::new(), |e| e.to_string()),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

/// The scene's view at `yaw`, rendered from its ground truth when the corpus
/// lacks it, re-expressed in that camera's frame.
pub(super) fn view_at_yaw(scene: &Scene, yaw: f64) -> Result<Scene> {
    if let Some(i) = scene.views.iter().position(|v| v.yaw_deg == yaw) {
        return single_view_scene(scene, i);
    }
    let size = scene.views.first().map_or(64, |v| v.width());
    let render = RenderConfig {
        image_size: size,
        view_angles: vec![yaw],
    };
    let rendered = Scene {
        views: vec![render_view(&scene.gt_mesh, yaw, &render)],
        ..scene.clone()
    };
    single_view_scene(&rendered, 0)
}

impl Evaluator<'_> {
    /// Single-view Chamfer per yaw bucket, with the surrogate's keypoint
    /// error on the same views.
    pub fn yaw_analysis(&self, yaws: &[f64], descent: &DescentConfig, eval: &EvalConfig) -> Result<YawReport> {
        descent.validate()?;
        eval.validate()?;
        let cfg = DescentConfig {
            views_used: 1,
            ..descent.clone()
        };
        let mut buckets = Vec::with_capacity(yaws.len());
        for &yaw in yaws {
            let scenes = self
                .scenes
                .iter()
                .map(|s| view_at_yaw(s, yaw))
                .collect::<Result<Vec<_>>>()?;
            let per_scene_mm = map_indexed(scenes.len(), self.workers, |i| -> Result<f64> {
                let r = run_descent(self.model, &scenes[i].views, &cfg)?;
                score_mesh(&scenes[i], &r.mesh, eval)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let heatmap_error_px = match self.model.heatmap_net() {
                Some(net) => heatmap_error_px(
                    net,
                    &self.model.heatmap_store,
                    &scenes,
                    &self.model.keypoint_ids,
                    180.0,
                    self.model.cfg.feature_res,
                )
                .ok(),
                None => None,
            };
            buckets.push(YawBucket {
                yaw_deg: yaw,
                per_scene_mm,
                heatmap_error_px,
            });
        }
        Ok(YawReport {
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            checkpoint_fingerprint: self.checkpoint_fingerprint.clone(),
            scene_ids: self.scenes.iter().map(|s| s.identity_id.clone()).collect(),
            buckets,
        })
    }
}
