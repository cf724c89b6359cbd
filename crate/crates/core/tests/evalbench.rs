use glvd::config::{EncodingMode, ModelConfig};
use glvd::descent::{run_descent, DescentConfig, GlvdModel, UpdateScheme};
use glvd::evalbench::{
    ablation_rows, ablation_suite, comparison_csv, score_mesh, select_views, summarize, view_order, EvalConfig,
    Evaluator, KEYPOINT_SWEEP, SWEEP_CLIPS, SWEEP_STEPS, YAW_BUCKETS,
};
use glvd::geometry::io::read_ply;
use glvd::geometry::Scene;
use glvd::synthdata::{generate_corpus, single_view_scene, Corpus, CorpusConfig, Split};
use glvd::training::TrainConfig;
use proptest::prelude::*;

fn tiny_model_config(encoding: EncodingMode) -> ModelConfig {
    ModelConfig {
        feature_res: 16,
        feature_channels: 4,
        stacks: 2,
        norm_groups: 2,
        keypoint_channels: 4,
        heatmap_channels: 4,
        num_keypoints: 3,
        gk_hidden: 8,
        gv_hidden: 8,
        sdf_hidden: 8,
        attention_hidden: 4,
        encoding,
        ..ModelConfig::default()
    }
}

struct Data {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    test: Vec<Scene>,
}

fn data() -> Data {
    data_at(2)
}

fn data_at(template_resolution: usize) -> Data {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        n_train: 2,
        n_val: 1,
        n_test: 3,
        image_size: 32,
        template_resolution,
        ..CorpusConfig::default()
    };
    generate_corpus(dir.path(), &cfg, 1).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let test = corpus.load_split(Split::Test).unwrap();
    Data {
        _dir: dir,
        corpus,
        test,
    }
}

fn model(d: &Data, cfg: &ModelConfig, seed: u64) -> GlvdModel {
    let kps = d.corpus.keypoints(cfg.num_keypoints).unwrap().vertex_indices;
    GlvdModel::new(cfg, d.corpus.mean_template(), kps, seed).unwrap()
}

fn evaluator<'a>(d: &'a Data, m: &'a GlvdModel, workers: usize) -> Evaluator<'a> {
    Evaluator {
        model: m,
        checkpoint_fingerprint: "ckpt".into(),
        corpus_fingerprint: d.corpus.fingerprint().to_string(),
        scenes: &d.test,
        workers,
    }
}

fn quick_eval() -> EvalConfig {
    EvalConfig {
        chamfer_samples: 400,
        ..EvalConfig::default()
    }
}

#[test]
fn view_order_is_front_first_then_alternating() {
    let yaws = [0.0, 30.0, -30.0, 60.0, -60.0, 90.0, -90.0, 180.0];
    assert_eq!(view_order(&yaws), (0..8).collect::<Vec<_>>());
    let shuffled = [180.0, -30.0, 60.0, 0.0, 30.0];
    let order: Vec<f64> = view_order(&shuffled).iter().map(|i| shuffled[*i]).collect();
    assert_eq!(order, vec![0.0, 30.0, -30.0, 60.0, 180.0]);
}

#[test]
fn view_selection() {
    let d = data();
    let s = &d.test[0];
    assert!(select_views(s, 0, false).is_err());
    assert!(select_views(s, s.views.len() + 1, false).is_err());
    assert_eq!(select_views(s, 1, false).unwrap(), single_view_scene(s, 0).unwrap());
    let three = select_views(s, 3, false).unwrap();
    let yaws: Vec<f64> = three.views.iter().map(|v| v.yaw_deg).collect();
    assert_eq!(yaws, vec![0.0, 30.0, -30.0]);
    assert_eq!(three.gt_mesh, s.gt_mesh);
    let canon = select_views(s, 1, true).unwrap();
    assert_eq!(canon.views[0], s.views[0]);
}

#[test]
fn ground_truth_predictions_score_zero() {
    let d = data();
    for s in &d.test {
        let sv = single_view_scene(s, 1).unwrap();
        assert!(score_mesh(&sv, &sv.gt_mesh, &quick_eval()).unwrap() < 1e-9);
    }
}

proptest! {
    #[test]
    fn summary_matches_hand_statistics(values in prop::collection::vec(0.0f64..50.0, 1..30)) {
        let s = summarize(&values);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        prop_assert!((s.mean - mean).abs() <= 1e-12);
        let below = values.iter().filter(|v| **v < s.median).count();
        let above = values.iter().filter(|v| **v > s.median).count();
        prop_assert!(below <= values.len() / 2 && above <= values.len() / 2);
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        prop_assert!((s.std - var.sqrt()).abs() <= 1e-9);
    }
}

#[test]
fn summary_examples() {
    let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!((s.mean, s.median, s.n), (2.5, 2.5, 4));
    assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
    assert_eq!(summarize(&[5.0, 1.0, 3.0]).median, 3.0);
}

#[test]
fn evaluation_report_contracts() {
    let d = data();
    let m = model(&d, &tiny_model_config(EncodingMode::Relative), 3);
    let out = tempfile::tempdir().unwrap();
    let descent = DescentConfig {
        steps: 3,
        ..DescentConfig::default()
    };
    let eval = EvalConfig {
        view_counts: vec![1, 3],
        track_steps: true,
        ..quick_eval()
    };
    let a = evaluator(&d, &m, 1).evaluate("glvd", &descent, &eval, Some(out.path())).unwrap();
    a.validate(d.test.len()).unwrap();
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.corpus_fingerprint, d.corpus.fingerprint());

    for r in &a.rows {
        let hand = r.per_scene_mm.iter().sum::<f64>() / r.per_scene_mm.len() as f64;
        assert!((r.summary().mean - hand).abs() <= 1e-12);
        assert_eq!(r.per_step_mm.len(), d.test.len());
        assert!(r.per_step_mm.iter().all(|s| s.len() == descent.steps + 1));
        for (i, s) in d.test.iter().enumerate() {
            // The final step's score is the row value.
            assert_eq!(r.per_step_mm[i][descent.steps], r.per_scene_mm[i]);
            // Persisted predictions reproduce the score.
            let path = out.path().join("glvd").join(format!("views{}", r.views)).join(format!("{}.ply", s.identity_id));
            let mesh = read_ply(&path).unwrap();
            assert_eq!(mesh.topology_id(), m.template.topology_id());
            let scene = select_views(s, r.views, false).unwrap();
            let again = score_mesh(&scene, &mesh, &eval).unwrap();
            assert!((again - r.per_scene_mm[i]).abs() <= 1e-12);
        }
    }

    // Same inputs, same bytes, whatever the worker count.
    let b = evaluator(&d, &m, 3).evaluate("glvd", &descent, &eval, None).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.per_scene_csv().unwrap(), b.per_scene_csv().unwrap());
    assert_eq!(a.steps_csv().unwrap(), b.steps_csv().unwrap());

    let csv = a.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("label,views,mean_mm,median_mm,std_mm,n,corpus,checkpoint"));
    assert_eq!(a.per_scene_csv().unwrap().lines().count(), 1 + 2 * d.test.len());

    // Too many views.
    let bad = EvalConfig {
        view_counts: vec![9],
        ..quick_eval()
    };
    assert!(evaluator(&d, &m, 1).evaluate("glvd", &descent, &bad, None).is_err());
    assert!(EvalConfig {
        view_counts: vec![],
        ..quick_eval()
    }
    .validate()
    .is_err());
}

#[test]
fn comparison_rejects_mixed_corpora() {
    let d = data();
    let m = model(&d, &tiny_model_config(EncodingMode::None), 0);
    let descent = DescentConfig {
        steps: 1,
        ..DescentConfig::default()
    };
    let a = evaluator(&d, &m, 1).evaluate("a", &descent, &quick_eval(), None).unwrap();
    let mut b = a.clone();
    b.rows[0].label = "b".into();
    let table = comparison_csv(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(table.lines().count(), 3);
    b.corpus_fingerprint = "other".into();
    assert!(comparison_csv(&[a, b]).is_err());
}

#[test]
fn steps_clipping_grid() {
    let d = data();
    let m = model(&d, &tiny_model_config(EncodingMode::Relative), 1);
    let r = evaluator(&d, &m, 1)
        .sweep_steps_clipping(&DescentConfig::default(), &quick_eval())
        .unwrap();
    assert_eq!(r.cells.len(), 24);
    assert_eq!(r.grid_csv().unwrap().lines().count(), 25);
    assert_eq!(r.long_csv().unwrap().lines().count(), 1 + 24 * d.test.len());
    assert_eq!(r.timing_csv().unwrap().lines().count(), 25);
    for c in &r.cells {
        assert!(SWEEP_STEPS.contains(&c.steps) && SWEEP_CLIPS.contains(&c.clip));
        assert_eq!(c.per_scene_mm.len(), d.test.len());
        assert!(c.max_travel <= c.steps as f64 * c.clip + 1e-12, "{} steps clip {}", c.steps, c.clip);
    }
    let first = &r.cells[0];
    assert_eq!((first.steps, first.clip), (1, 0.05));
    assert!(first.max_travel <= 0.05 + 1e-12);

    // Wall-clock grows with steps; soft check with 20% slack on clip-averaged times.
    let secs: Vec<f64> = SWEEP_STEPS
        .iter()
        .map(|s| r.cells.iter().filter(|c| c.steps == *s).map(|c| c.secs_per_scene).sum::<f64>())
        .collect();
    for w in secs.windows(2) {
        assert!(w[1] >= 0.8 * w[0], "{secs:?}");
    }
}

#[test]
fn yaw_buckets() {
    let d = data();
    let descent = DescentConfig {
        steps: 2,
        ..DescentConfig::default()
    };
    let m = model(&d, &tiny_model_config(EncodingMode::Relative), 2);
    let r = evaluator(&d, &m, 1).yaw_analysis(&YAW_BUCKETS, &descent, &quick_eval()).unwrap();
    assert_eq!(r.buckets.len(), 3);
    let evaluated: usize = r.buckets.iter().map(|b| b.per_scene_mm.len()).sum();
    assert_eq!(evaluated, YAW_BUCKETS.len() * d.test.len());
    assert!(r.buckets.iter().all(|b| b.heatmap_error_px.is_some()));
    assert_eq!(r.to_csv().unwrap().lines().count(), 4);

    // The corpus 0° view is used as-is; 45° is rendered on demand.
    let front = r.bucket(0.0).unwrap();
    let ev = evaluator(&d, &m, 1).evaluate("x", &descent, &quick_eval(), None).unwrap();
    assert_eq!(front.per_scene_mm, ev.rows[0].per_scene_mm);

    let lvd = model(&d, &tiny_model_config(EncodingMode::None), 2);
    let r = evaluator(&d, &lvd, 1).yaw_analysis(&[45.0], &descent, &quick_eval()).unwrap();
    assert!(r.buckets[0].heatmap_error_px.is_none());
    assert!(r.buckets[0].per_scene_mm.iter().all(|v| v.is_finite()));
}

#[test]
fn ablation_row_definitions() {
    let base = tiny_model_config(EncodingMode::Relative);
    let rows = ablation_rows(&base, &TrainConfig::default(), &DescentConfig::default());
    let get = |l: &str| rows.iter().find(|r| r.label == l).unwrap();
    assert_eq!(get("a_lvd").model.encoding, EncodingMode::None);
    assert!(!get("g_no_vertex_pos").model.include_vertex_pos);
    assert_eq!(get("g_no_vertex_pos").model.encoding, EncodingMode::Relative);
    assert!(!get("c_no_heatmap").model.heatmap_prior);
    assert_eq!(get("d_no_keypoint_noise").train.sigma_kp, 0.0);
    assert_eq!(get("e_no_dropout").train.dropout_p, 0.0);
    assert!(get("f_canonical_frame").train.canonical_frame && get("f_canonical_frame").canonical_eval);
    assert_eq!(get("h_concat").model.encoding, EncodingMode::Concat);
    assert_eq!(get("i_norm").model.encoding, EncodingMode::Norm);
    assert_eq!(get("j_attention").model.encoding, EncodingMode::Attention);
    assert!(get("k_global_attention").model.global_attention);
    assert_eq!(get("l_glvd").model, base);
    let ks: Vec<usize> = rows
        .iter()
        .filter(|r| r.label.starts_with("keypoints_"))
        .map(|r| r.model.num_keypoints)
        .collect();
    assert_eq!(ks, KEYPOINT_SWEEP.to_vec());
    assert_eq!(get("sequential").descent.update_scheme, UpdateScheme::Sequential);
    assert_eq!(get("sequential").training_key(), get("l_glvd").training_key());
    let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), rows.len());
}

#[test]
fn ablation_suite_trains_each_setup_once() {
    // Enough facial vertices for the largest keypoint count.
    let d = data_at(6);
    let base = ModelConfig {
        num_keypoints: 18,
        ..tiny_model_config(EncodingMode::Relative)
    };
    let descent = DescentConfig {
        steps: 1,
        ..DescentConfig::default()
    };
    let rows = ablation_rows(&base, &TrainConfig::default(), &descent);
    let mut trained = Vec::new();
    let reports = ablation_suite(&rows, &d.test[..1], d.corpus.fingerprint(), &quick_eval(), 1, &mut |row| {
        trained.push(row.label.clone());
        Ok((model(&d, &row.model, 0), row.training_key()))
    })
    .unwrap();
    assert_eq!(reports.len(), rows.len());
    // keypoints_18 and sequential reuse the l_glvd checkpoint.
    assert_eq!(trained.len(), rows.len() - 2);
    assert!(!trained.iter().any(|l| l == "sequential" || l == "keypoints_18"));
    let table = comparison_csv(&reports).unwrap();
    assert_eq!(table.lines().count(), 1 + rows.len());
    let seq = reports.iter().find(|r| r.rows[0].label == "sequential").unwrap();
    let glvd = reports.iter().find(|r| r.rows[0].label == "l_glvd").unwrap();
    assert_eq!(seq.checkpoint_fingerprint, glvd.checkpoint_fingerprint);
}

#[test]
fn sweep_first_cell_bound_holds_per_vertex() {
    let d = data();
    let m = model(&d, &tiny_model_config(EncodingMode::Relative), 5);
    let sv = single_view_scene(&d.test[0], 0).unwrap();
    let r = run_descent(
        &m,
        &sv.views,
        &DescentConfig {
            steps: 1,
            clip_infer: 0.05,
            ..DescentConfig::default()
        },
    )
    .unwrap();
    for (a, b) in m.template.vertices.iter().zip(&r.mesh.vertices) {
        let t = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        assert!(t <= 0.05 + 1e-12);
    }
}
