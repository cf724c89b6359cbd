//! Evaluation protocol: unidirectional Chamfer tables over view counts, the
//! steps/clipping sweep, the yaw analysis and the ablation suite.
//!
//! Report CSVs hold only deterministic values; wall-clock goes to separate
//! timing tables.

mod ablation;
mod report;
mod sweep;
mod yaw;

pub use ablation::{ablation_rows, ablation_suite, AblationRow, KEYPOINT_SWEEP};
pub use report::{comparison_csv, summarize, EvalReport, EvalRow, Summary};
pub use sweep::{SweepCell, SweepReport, SWEEP_CLIPS, SWEEP_STEPS};
pub use yaw::{YawBucket, YawReport, YAW_BUCKETS};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::descent::{run_descent, DescentConfig, GlvdModel};
use crate::error::{Error, Result};
use crate::geometry::io::write_ply;
use crate::geometry::{chamfer_mm, Mesh, Scene};
use crate::parallel::map_indexed;
use crate::synthdata::single_view_scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub view_counts: Vec<usize>,
    /// Ground-truth surface samples per Chamfer evaluation.
    pub chamfer_samples: usize,
    pub chamfer_seed: u64,
    /// Evaluate single views in the canonical frame instead of the camera frame.
    pub canonical_frame: bool,
    /// Also score every intermediate descent state.
    pub track_steps: bool,
    /// Yaw buckets of the single-view analysis; empty skips it.
    pub yaw_buckets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            view_counts: vec![1],
            chamfer_samples: 5000,
            chamfer_seed: 0,
            canonical_frame: false,
            track_steps: false,
            yaw_buckets: YAW_BUCKETS.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.view_counts.is_empty() || self.view_counts.contains(&0) {
            return Err(Error::Config(format!(
                "view_counts must be non-empty and ≥ 1, got {:?}",
                self.view_counts
            )));
        }
        if self.chamfer_samples == 0 {
            return Err(Error::Config("chamfer_samples must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// View indices ordered by |yaw|, positive before negative at equal |yaw|:
/// 0, +30, −30, +60, … Ties keep their stored order.
pub fn view_order(yaws: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..yaws.len()).collect();
    idx.sort_by(|a, b| {
        let ka = (yaws[*a].abs(), yaws[*a] < 0.0);
        let kb = (yaws[*b].abs(), yaws[*b] < 0.0);
        ka.partial_cmp(&kb).expect("finite yaw")
    });
    idx
}

/// The first `count` views of `scene` in [`view_order`]. A single view is
/// re-expressed in its camera frame unless `canonical` is set.
pub fn select_views(scene: &Scene, count: usize, canonical: bool) -> Result<Scene> {
    if count == 0 || count > scene.views.len() {
        return Err(Error::Invalid(format!(
            "{count} views requested for scene {}, which has {}",
            scene.identity_id,
            scene.views.len()
        )));
    }
    let yaws: Vec<f64> = scene.views.iter().map(|v| v.yaw_deg).collect();
    let order = view_order(&yaws);
    if count == 1 && !canonical {
        return single_view_scene(scene, order[0]);
    }
    Ok(Scene {
        views: order[..count].iter().map(|i| scene.views[*i].clone()).collect(),
        ..scene.clone()
    })
}

/// Unidirectional Chamfer (mm) of `pred` against the scene's ground truth.
pub fn score_mesh(scene: &Scene, pred: &Mesh, cfg: &EvalConfig) -> Result<f64> {
    chamfer_mm(&scene.gt_mesh, pred, cfg.chamfer_samples, cfg.chamfer_seed, &scene.normalization)
}

/// A trained model bound to the scenes it is evaluated on.
pub struct Evaluator<'a> {
    pub model: &'a GlvdModel,
    pub checkpoint_fingerprint: String,
    pub corpus_fingerprint: String,
    pub scenes: &'a [Scene],
    pub workers: usize,
}

struct SceneRun {
    chamfer: f64,
    per_step: Vec<f64>,
    secs: f64,
    mesh: Mesh,
}

impl Evaluator<'_> {
    fn run_scene(&self, scene: &Scene, descent: &DescentConfig, eval: &EvalConfig) -> Result<SceneRun> {
        let t = Instant::now();
        let result = run_descent(self.model, &scene.views, descent)?;
        let secs = t.elapsed().as_secs_f64();
        let chamfer = score_mesh(scene, &result.mesh, eval)?;
        let per_step = if eval.track_steps {
            result
                .history
                .iter()
                .map(|s| score_mesh(scene, &self.model.template.with_vertices(s.vertices.clone()), eval))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(SceneRun {
            chamfer,
            per_step,
            secs,
            mesh: result.mesh,
        })
    }

    fn run_all(&self, views: usize, descent: &DescentConfig, eval: &EvalConfig) -> Result<Vec<SceneRun>> {
        let cfg = DescentConfig {
            views_used: views,
            ..descent.clone()
        };
        map_indexed(self.scenes.len(), self.workers, |i| -> Result<SceneRun> {
            let scene = select_views(&self.scenes[i], views, eval.canonical_frame)?;
            self.run_scene(&scene, &cfg, eval)
        })
        .into_iter()
        .collect()
    }

    /// One row per view count. Predicted meshes go to
    /// `persist/<label>/views<v>/<scene>.ply` when `persist` is given.
    pub fn evaluate(&self, label: &str, descent: &DescentConfig, eval: &EvalConfig, persist: Option<&Path>) -> Result<EvalReport> {
        descent.validate()?;
        eval.validate()?;
        if self.scenes.is_empty() {
            return Err(Error::Invalid("no scenes to evaluate".into()));
        }
        let mut rows = Vec::with_capacity(eval.view_counts.len());
        for &v in &eval.view_counts {
            let runs = self.run_all(v, descent, eval)?;
            if let Some(root) = persist {
                let dir = root.join(label).join(format!("views{v}"));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (s, r) in self.scenes.iter().zip(&runs) {
                    write_ply(&dir.join(format!("{}.ply", s.identity_id)), &r.mesh)?;
                }
            }
            rows.push(EvalRow {
                label: label.to_string(),
                views: v,
                scene_ids: self.scenes.iter().map(|s| s.identity_id.clone()).collect(),
                per_scene_mm: runs.iter().map(|r| r.chamfer).collect(),
                per_step_mm: runs.iter().map(|r| r.per_step.clone()).collect(),
                secs_per_scene: runs.iter().map(|r| r.secs).sum::<f64>() / runs.len() as f64,
            });
        }
        Ok(EvalReport {
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            checkpoint_fingerprint: self.checkpoint_fingerprint.clone(),
            rows,
        })
    }
}
