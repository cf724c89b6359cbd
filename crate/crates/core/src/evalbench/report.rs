use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            median: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Summary {
        mean,
        median,
        std: var.sqrt(),
        n,
    }
}

/// One configuration at one view count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub views: usize,
    pub scene_ids: Vec<String>,
    pub per_scene_mm: Vec<f64>,
    /// Chamfer of every descent state `0..=steps` per scene; empty when not tracked.
    pub per_step_mm: Vec<Vec<f64>>,
    /// Wall-clock; left out of serialized reports.
    #[serde(skip)]
    pub secs_per_scene: f64,
}

impl EvalRow {
    pub fn summary(&self) -> Summary {
        summarize(&self.per_scene_mm)
    }

    /// Median over scenes of the Chamfer at each descent step.
    pub fn median_per_step(&self) -> Vec<f64> {
        let steps = self.per_step_mm.first().map_or(0, Vec::len);
        (0..steps)
            .map(|t| summarize(&self.per_step_mm.iter().map(|s| s[t]).collect::<Vec<_>>()).median)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_fingerprint: String,
    pub checkpoint_fingerprint: String,
    pub rows: Vec<EvalRow>,
}

fn csv_string(build: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    build(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

fn f(x: f64) -> String {
    format!("{x}")
}

impl EvalReport {
    /// Check row shapes against `expected_scenes`.
    pub fn validate(&self, expected_scenes: usize) -> Result<()> {
        for r in &self.rows {
            if r.per_scene_mm.len() != expected_scenes || r.scene_ids.len() != expected_scenes {
                return Err(Error::Invalid(format!(
                    "row `{}` ({} views) has {} values for {expected_scenes} scenes",
                    r.label,
                    r.views,
                    r.per_scene_mm.len()
                )));
            }
            if !r.per_step_mm.is_empty() {
                let len = r.per_step_mm[0].len();
                if r.per_step_mm.len() != expected_scenes || r.per_step_mm.iter().any(|s| s.len() != len) {
                    return Err(Error::Invalid(format!("row `{}` has ragged per-step values", r.label)));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, label: &str, views: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.label == label && r.views == views)
    }

    /// One line per row with summary statistics.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(|w| {
            w.write_record(["label", "views", "mean_mm", "median_mm", "std_mm", "n", "corpus", "checkpoint"])?;
            for r in &self.rows {
                let s = r.summary();
                w.write_record([
                    r.label.clone(),
                    r.views.to_string(),
                    f(s.mean),
                    f(s.median),
                    f(s.std),
                    s.n.to_string(),
                    self.corpus_fingerprint.clone(),
                    self.checkpoint_fingerprint.clone(),
                ])?;
            }
            Ok(())
        })
    }

    /// Long format: one line per (row, scene).
    pub fn per_scene_csv(&self) -> Result<String> {
        csv_string(|w| {
            w.write_record(["label", "views", "scene", "chamfer_mm"])?;
            for r in &self.rows {
                for (id, v) in r.scene_ids.iter().zip(&r.per_scene_mm) {
                    w.write_record([r.label.clone(), r.views.to_string(), id.clone(), f(*v)])?;
                }
            }
            Ok(())
        })
    }

    /// Long format: one line per (row, scene, descent step).
    pub fn steps_csv(&self) -> Result<String> {
        csv_string(|w| {
            w.write_record(["label", "views", "scene", "step", "chamfer_mm"])?;
            for r in &self.rows {
                for (id, steps) in r.scene_ids.iter().zip(&r.per_step_mm) {
                    for (t, v) in steps.iter().enumerate() {
                        w.write_record([r.label.clone(), r.views.to_string(), id.clone(), t.to_string(), f(*v)])?;
                    }
                }
            }
            Ok(())
        })
    }

    /// Wall-clock per row; not reproducible, so kept apart from the other tables.
    pub fn timing_csv(&self) -> Result<String> {
        csv_string(|w| {
            w.write_record(["label", "views", "secs_per_scene"])?;
            for r in &self.rows {
                w.write_record([r.label.clone(), r.views.to_string(), f(r.secs_per_scene)])?;
            }
            Ok(())
        })
    }
}

/// Summary rows of several reports in one table. All reports must come from
/// the same corpus.
pub fn comparison_csv(reports: &[EvalReport]) -> Result<String> {
    if let Some(first) = reports.first() {
        if let Some(bad) = reports.iter().find(|r| r.corpus_fingerprint != first.corpus_fingerprint) {
            return Err(Error::Fingerprint {
                expected: first.corpus_fingerprint.clone(),
                found: bad.corpus_fingerprint.clone(),
            });
        }
    }
    csv_string(|w| {
        w.write_record(["label", "views", "mean_mm", "median_mm", "std_mm", "n", "corpus", "checkpoint"])?;
        for rep in reports {
            for r in &rep.rows {
                let s = r.summary();
                w.write_record([
                    r.label.clone(),
                    r.views.to_string(),
                    f(s.mean),
                    f(s.median),
                    f(s.std),
                    s.n.to_string(),
                    rep.corpus_fingerprint.clone(),
                    rep.checkpoint_fingerprint.clone(),
                ])?;
            }
        }
        Ok(())
    })
}
