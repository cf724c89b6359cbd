use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{summarize, Summary};
use super::{score_mesh, select_views, EvalConfig, Evaluator};
use crate::descent::{run_descent, DescentConfig};
use crate::error::Result;
use crate::geometry::linalg::dist2;
use crate::geometry::Mesh;
use crate::parallel::map_indexed;

pub const SWEEP_STEPS: [usize; 6] = [1, 2, 5, 10, 20, 40];
pub const SWEEP_CLIPS: [f64; 4] = [0.05, 0.1, 0.2, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub steps: usize,
    pub clip: f64,
    pub per_scene_mm: Vec<f64>,
    /// Largest vertex displacement from the initialization over all scenes.
    pub max_travel: f64,
    /// Wall-clock; left out of serialized reports.
    #[serde(skip)]
    pub secs_per_scene: f64,
}

impl SweepCell {
    pub fn summary(&self) -> Summary {
        summarize(&self.per_scene_mm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub corpus_fingerprint: String,
    pub checkpoint_fingerprint: String,
    pub views: usize,
    pub scene_ids: Vec<String>,
    pub cells: Vec<SweepCell>,
}

fn travel(init: &Mesh, out: &Mesh) -> f64 {
    init.vertices
        .iter()
        .zip(&out.vertices)
        .map(|(a, b)| dist2(*a, *b).sqrt())
        .fold(0.0, f64::max)
}

impl SweepReport {
    /// The grid, one line per (steps, clip) cell.
    pub fn grid_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["steps", "clip", "mean_mm", "median_mm", "std_mm", "n", "max_travel"])?;
        for c in &self.cells {
            let s = c.summary();
            w.write_record([
                c.steps.to_string(),
                c.clip.to_string(),
                s.mean.to_string(),
                s.median.to_string(),
                s.std.to_string(),
                s.n.to_string(),
                c.max_travel.to_string(),
            ])?;
        }
        finish(w)
    }

    /// Plot-ready long format: one line per (cell, scene).
    pub fn long_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["steps", "clip", "scene", "chamfer_mm"])?;
        for c in &self.cells {
            for (id, v) in self.scene_ids.iter().zip(&c.per_scene_mm) {
                w.write_record([c.steps.to_string(), c.clip.to_string(), id.clone(), v.to_string()])?;
            }
        }
        finish(w)
    }

    pub fn timing_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["steps", "clip", "secs_per_scene"])?;
        for c in &self.cells {
            w.write_record([c.steps.to_string(), c.clip.to_string(), c.secs_per_scene.to_string()])?;
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| crate::error::Error::Invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

impl Evaluator<'_> {
    /// Every (steps, clip) pair of the grid, each run from scratch so that
    /// wall-clock reflects the full schedule.
    pub fn sweep_steps_clipping(&self, base: &DescentConfig, eval: &EvalConfig) -> Result<SweepReport> {
        base.validate()?;
        eval.validate()?;
        let views = base.views_used;
        let scenes = self
            .scenes
            .iter()
            .map(|s| select_views(s, views, eval.canonical_frame))
            .collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::with_capacity(SWEEP_STEPS.len() * SWEEP_CLIPS.len());
        for &steps in &SWEEP_STEPS {
            for &clip in &SWEEP_CLIPS {
                let cfg = DescentConfig {
                    steps,
                    clip_infer: clip,
                    ..base.clone()
                };
                let runs = map_indexed(scenes.len(), self.workers, |i| -> Result<(f64, f64, f64)> {
                    let t = Instant::now();
                    let r = run_descent(self.model, &scenes[i].views, &cfg)?;
                    let secs = t.elapsed().as_secs_f64();
                    Ok((score_mesh(&scenes[i], &r.mesh, eval)?, travel(&self.model.template, &r.mesh), secs))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                cells.push(SweepCell {
                    steps,
                    clip,
                    per_scene_mm: runs.iter().map(|r| r.0).collect(),
                    max_travel: runs.iter().map(|r| r.1).fold(0.0, f64::max),
                    secs_per_scene: runs.iter().map(|r| r.2).sum::<f64>() / runs.len().max(1) as f64,
                });
            }
        }
        Ok(SweepReport {
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            checkpoint_fingerprint: self.checkpoint_fingerprint.clone(),
            views,
            scene_ids: self.scenes.iter().map(|s| s.identity_id.clone()).collect(),
            cells,
        })
    }
}
