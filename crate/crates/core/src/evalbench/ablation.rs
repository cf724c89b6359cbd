use serde::{Deserialize, Serialize};

use super::{EvalConfig, EvalReport, Evaluator};
use crate::config::{EncodingMode, ModelConfig};
use crate::descent::{DescentConfig, GlvdModel, UpdateScheme};
use crate::error::Result;
use crate::fingerprint::fingerprint_json;
use crate::geometry::Scene;
use crate::training::{TrainConfig, TrainLoss};

/// Keypoint counts of the K sweep.
pub const KEYPOINT_SWEEP: [usize; 5] = [4, 6, 12, 18, 24];

/// One configuration of the ablation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub descent: DescentConfig,
    /// Reconstruct single views in the canonical frame.
    pub canonical_eval: bool,
}

impl AblationRow {
    /// Identity of the trained checkpoint this row needs.
    pub fn training_key(&self) -> String {
        fingerprint_json(&(&self.model, &self.train))
    }
}

/// Rows (a)–(l) of the encoding/training ablation, the keypoint-count sweep
/// and the sequential update scheme, all derived from one base setup.
pub fn ablation_rows(model: &ModelConfig, train: &TrainConfig, descent: &DescentConfig) -> Vec<AblationRow> {
    let glvd = ModelConfig {
        encoding: EncodingMode::Relative,
        ..model.clone()
    };
    let row = |label: &str, m: ModelConfig, t: TrainConfig| AblationRow {
        label: label.to_string(),
        model: m,
        train: t,
        descent: descent.clone(),
        canonical_eval: false,
    };
    let with_model = |label: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut m = glvd.clone();
        f(&mut m);
        row(label, m, train.clone())
    };
    let with_train = |label: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut t = train.clone();
        f(&mut t);
        row(label, glvd.clone(), t)
    };
    let mut rows = vec![
        with_model("a_lvd", &|m| m.encoding = EncodingMode::None),
        with_train("b_clipped_l2", &|t| t.loss = TrainLoss::ClippedL2),
        with_model("c_no_heatmap", &|m| m.heatmap_prior = false),
        with_train("d_no_keypoint_noise", &|t| t.sigma_kp = 0.0),
        with_train("e_no_dropout", &|t| t.dropout_p = 0.0),
        AblationRow {
            canonical_eval: true,
            ..with_train("f_canonical_frame", &|t| t.canonical_frame = true)
        },
        with_model("g_no_vertex_pos", &|m| m.include_vertex_pos = false),
        with_model("h_concat", &|m| m.encoding = EncodingMode::Concat),
        with_model("i_norm", &|m| m.encoding = EncodingMode::Norm),
        with_model("j_attention", &|m| m.encoding = EncodingMode::Attention),
        with_model("k_global_attention", &|m| m.global_attention = true),
        row("l_glvd", glvd.clone(), train.clone()),
    ];
    for k in KEYPOINT_SWEEP {
        rows.push(with_model(&format!("keypoints_{k}"), &|m| m.num_keypoints = k));
    }
    rows.push(AblationRow {
        descent: DescentConfig {
            update_scheme: UpdateScheme::Sequential,
            ..descent.clone()
        },
        ..row("sequential", glvd.clone(), train.clone())
    });
    rows
}

/// Train (via `train_row`) and evaluate every row. Rows with the same model
/// and training setup share one checkpoint. `train_row` returns the model and
/// its checkpoint fingerprint.
pub fn ablation_suite(
    rows: &[AblationRow],
    scenes: &[Scene],
    corpus_fingerprint: &str,
    eval: &EvalConfig,
    workers: usize,
    train_row: &mut dyn FnMut(&AblationRow) -> Result<(GlvdModel, String)>,
) -> Result<Vec<EvalReport>> {
    let mut trained: Vec<(String, GlvdModel, String)> = Vec::new();
    let mut reports = Vec::with_capacity(rows.len());
    for row in rows {
        let key = row.training_key();
        let idx = match trained.iter().position(|(k, _, _)| *k == key) {
            Some(i) => i,
            None => {
                let (model, fp) = train_row(row)?;
                trained.push((key, model, fp));
                trained.len() - 1
            }
        };
        let (_, model, fp) = &trained[idx];
        let evaluator = Evaluator {
            model,
            checkpoint_fingerprint: fp.clone(),
            corpus_fingerprint: corpus_fingerprint.to_string(),
            scenes,
            workers,
        };
        let cfg = EvalConfig {
            canonical_frame: eval.canonical_frame || row.canonical_eval,
            ..eval.clone()
        };
        reports.push(evaluator.evaluate(&row.label, &row.descent, &cfg, None)?);
    }
    Ok(reports)
}
