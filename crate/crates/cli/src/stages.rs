use std::path::{Path, PathBuf};

use glvd::config::ModelConfig;
use glvd::descent::{run_descent, DescentConfig, GlvdModel};
use glvd::evalbench::{ablation_rows, ablation_suite, comparison_csv, Evaluator};
use glvd::experiment::ExperimentConfig;
use glvd::fingerprint::{fingerprint_bytes, fingerprint_json};
use glvd::geometry::io::{write_ply, write_points_ply};
use glvd::geometry::{CameraView, Scene};
use glvd::synthdata::{generate_corpus, read_view, reference_extrinsics, Corpus, Split};
use glvd::tensor::Tensor;
use glvd::training::{
    load_heatmap_file, pretrain_sdf, save_heatmap, train_glvd, train_heatmap, EpochStats, SdfEncoder, TrainConfig,
};
use glvd::Error;

use crate::error::{CliError, CliResult};
use crate::manifest::{file_fingerprint, OutputFile};
use crate::{write_file, Invocation};

pub const HEATMAP_FILE: &str = "heatmap.bin";
pub const ENCODER_FILE: &str = "encoder.bin";
pub const MODEL_FILE: &str = "model.bin";
const KEYPOINT_RGB: [u8; 3] = [255, 0, 0];
const MAX_VIEWS: usize = 8;

#[derive(Default)]
pub struct StageRecord {
    pub corpus_fingerprint: Option<String>,
    pub inputs: Vec<OutputFile>,
}

impl StageRecord {
    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(OutputFile {
            path: path.display().to_string(),
            fingerprint: file_fingerprint(path)?,
        });
        Ok(())
    }
}

pub fn run_stage(inv: &Invocation, out: &Path) -> CliResult<StageRecord> {
    let cfg = &inv.config;
    let w = inv.workers;
    match inv.command.as_str() {
        "gen-corpus" => gen_corpus(cfg, out, w),
        "train-heatmap" => heatmap_stage(cfg, out, w),
        "pretrain-sdf" => sdf_stage(cfg, out, w),
        "train" => train_stage(cfg, out, w),
        "reconstruct" => reconstruct(cfg, &inv.args.views, inv.args.trace, out),
        "evaluate" => evaluate(cfg, split(&inv.args.split)?, out, w),
        "ablate" => ablate(cfg, split(&inv.args.split)?, out, w),
        "sweep" => sweep(cfg, split(&inv.args.split)?, out, w),
        other => Err(CliError::validation(format!("unknown command `{other}`"))),
    }
}

fn split(s: &Option<String>) -> CliResult<Split> {
    Ok(s.as_deref().map(Split::parse).transpose()?.unwrap_or(Split::Test))
}

/// An artifact path from the config; a directory resolves to `file` inside it.
fn artifact(path: &Option<PathBuf>, key: &str, file: &str, producer: &str) -> CliResult<PathBuf> {
    let missing = |path: PathBuf| {
        CliError::from(Error::MissingArtifact {
            path,
            hint: producer.into(),
        })
    };
    let p = path.clone().ok_or_else(|| missing(PathBuf::from(format!("artifacts.{key}"))))?;
    let p = if p.is_dir() { p.join(file) } else { p };
    if !p.is_file() {
        return Err(missing(p));
    }
    Ok(p)
}

fn open_corpus(cfg: &ExperimentConfig, rec: &mut StageRecord) -> CliResult<Corpus> {
    let root = cfg.artifacts.corpus.clone().ok_or_else(|| {
        CliError::from(Error::MissingArtifact {
            path: PathBuf::from("artifacts.corpus (or GLVD_DATA_DIR)"),
            hint: "gen-corpus".into(),
        })
    })?;
    let corpus = Corpus::open(&root)?;
    rec.corpus_fingerprint = Some(corpus.fingerprint().to_string());
    Ok(corpus)
}

fn csv_bytes<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::runtime(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::runtime(e.to_string()))
}

fn json_bytes<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| CliError::runtime(e.to_string()))
}

fn gen_corpus(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<StageRecord> {
    let manifest = generate_corpus(out, &cfg.corpus, workers)?;
    Ok(StageRecord {
        corpus_fingerprint: Some(manifest.fingerprint),
        inputs: Vec::new(),
    })
}

fn heatmap_stage(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<StageRecord> {
    let mut rec = StageRecord::default();
    let corpus = open_corpus(cfg, &mut rec)?;
    let train = corpus.load_split(Split::Train)?;
    let val = corpus.load_split(Split::Val)?;
    let ids = corpus.keypoints(cfg.model.num_keypoints)?.vertex_indices;
    let (_, store, report) = train_heatmap(&train, &val, &ids, &cfg.model, &cfg.train, workers)?;
    save_heatmap(&out.join(HEATMAP_FILE), &store, &cfg.model, &ids, corpus.fingerprint())?;
    let rows = report.train_loss.iter().enumerate().map(|(e, l)| [e.to_string(), l.to_string()]);
    write_file(&out.join("heatmap_log.csv"), &csv_bytes(["epoch", "bce"], rows)?)?;
    write_file(
        &out.join("heatmap_report.json"),
        &json_bytes(&serde_json::json!({ "val_error_px": report.val_error_px }))?,
    )?;
    Ok(rec)
}

fn sdf_stage(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<StageRecord> {
    let mut rec = StageRecord::default();
    let corpus = open_corpus(cfg, &mut rec)?;
    let train = corpus.load_split(Split::Train)?;
    let val = corpus.load_split(Split::Val)?;
    let (enc, report) = pretrain_sdf(&train, &val, &cfg.model, &cfg.train, workers)?;
    enc.save(&out.join(ENCODER_FILE), corpus.fingerprint())?;
    let rows = report
        .train_loss
        .iter()
        .zip(&report.val_surface)
        .enumerate()
        .map(|(e, (t, v))| [e.to_string(), t.to_string(), v.to_string()]);
    write_file(&out.join("sdf_log.csv"), &csv_bytes(["epoch", "train_loss", "val_surface"], rows)?)?;
    Ok(rec)
}

/// An untrained model on the corpus template and keypoints.
fn new_model(corpus: &Corpus, model: &ModelConfig, seed: u64) -> CliResult<GlvdModel> {
    let ids = if model.encoding.uses_keypoints() {
        corpus.keypoints(model.num_keypoints)?.vertex_indices
    } else {
        Vec::new()
    };
    Ok(GlvdModel::new(model, corpus.mean_template(), ids, seed)?)
}

fn attach_heatmap(model: &mut GlvdModel, ids: &[usize], tensors: &[(String, Tensor)], path: &Path) -> CliResult<()> {
    if ids != model.keypoint_ids.as_slice() {
        return Err(CliError::validation(format!(
            "heatmap surrogate {} was trained for different keypoints ({} vs {})",
            path.display(),
            ids.len(),
            model.keypoint_ids.len()
        )));
    }
    model.load_heatmap(tensors)?;
    Ok(())
}

fn log_epoch(s: &EpochStats) {
    eprintln!(
        "epoch {:>4}  lr {:.2e}  loss {:.5}  vertex {:.5}  keypoint {:.5}",
        s.epoch, s.lr, s.loss, s.vertex, s.keypoint
    );
}

fn train_log(epochs: &[EpochStats]) -> CliResult<Vec<u8>> {
    csv_bytes(
        ["epoch", "lr", "loss", "vertex", "keypoint"],
        epochs.iter().map(|s| {
            [
                s.epoch.to_string(),
                s.lr.to_string(),
                s.loss.to_string(),
                s.vertex.to_string(),
                s.keypoint.to_string(),
            ]
        }),
    )
}

fn train_stage(cfg: &ExperimentConfig, out: &Path, workers: usize) -> CliResult<StageRecord> {
    let mut rec = StageRecord::default();
    let corpus = open_corpus(cfg, &mut rec)?;
    let mut model = new_model(&corpus, &cfg.model, cfg.train.seed)?;
    if model.heatmap_net().is_some() {
        let path = artifact(&cfg.artifacts.heatmap, "heatmap", HEATMAP_FILE, "train-heatmap")?;
        let (ids, tensors) = load_heatmap_file(&path, Some(corpus.fingerprint()))?;
        attach_heatmap(&mut model, &ids, &tensors, &path)?;
        rec.input(&path)?;
    }
    if cfg.artifacts.encoder.is_some() {
        let path = artifact(&cfg.artifacts.encoder, "encoder", ENCODER_FILE, "pretrain-sdf")?;
        let enc = SdfEncoder::load(&path, Some(corpus.fingerprint()))?;
        model.load_encoder(&enc.store.named_tensors())?;
        rec.input(&path)?;
    }
    let train = corpus.load_split(Split::Train)?;
    let report = train_glvd(&train, &mut model, &cfg.train, workers, &mut log_epoch)?;
    model.save(
        &out.join(MODEL_FILE),
        corpus.fingerprint(),
        serde_json::json!({ "train": cfg.train }),
    )?;
    write_file(&out.join("train_log.csv"), &train_log(&report.epochs)?)?;
    Ok(rec)
}

fn load_checkpoint(cfg: &ExperimentConfig, corpus: Option<&Corpus>, rec: &mut StageRecord) -> CliResult<(GlvdModel, String)> {
    let path = artifact(&cfg.artifacts.checkpoint, "checkpoint", MODEL_FILE, "train")?;
    let (model, _) = GlvdModel::load(&path, corpus.map(|c| c.fingerprint()), None)?;
    let fp = file_fingerprint(&path)?;
    rec.input(&path)?;
    Ok((model, fp))
}

fn reconstruct(cfg: &ExperimentConfig, views: &[PathBuf], trace: bool, out: &Path) -> CliResult<StageRecord> {
    let mut rec = StageRecord::default();
    if views.is_empty() || views.len() > MAX_VIEWS {
        return Err(CliError::validation(format!("reconstruct takes 1 to {MAX_VIEWS} view files, got {}", views.len())));
    }
    let (model, _) = load_checkpoint(cfg, None, &mut rec)?;
    let mut loaded: Vec<CameraView> = Vec::with_capacity(views.len());
    for p in views {
        let v = read_view(p, None).map_err(|e| CliError::validation(format!("bad view file {}: {e}", p.display())))?;
        rec.input(p)?;
        loaded.push(v);
    }
    if let [single] = loaded.as_mut_slice() {
        // A lone view is reconstructed in its own camera frame.
        let (r, t) = reference_extrinsics();
        single.rotation = r;
        single.translation = t;
    }
    let descent = DescentConfig {
        views_used: loaded.len(),
        ..cfg.descent.clone()
    };
    let result = run_descent(&model, &loaded, &descent)?;
    write_ply(&out.join("mesh.ply"), &result.mesh)?;
    let last = result.history.last().expect("initial state");
    if model.num_keypoints() > 0 {
        write_points_ply(&out.join("keypoints.ply"), &last.keypoints, KEYPOINT_RGB)?;
    }
    if trace {
        let dir = out.join("trace");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        for s in &result.history {
            write_ply(
                &out.join("trace").join(format!("step_{:03}.ply", s.iteration)),
                &model.template.with_vertices(s.vertices.clone()),
            )?;
            if model.num_keypoints() > 0 {
                write_points_ply(
                    &out.join("trace").join(format!("keypoints_{:03}.ply", s.iteration)),
                    &s.keypoints,
                    KEYPOINT_RGB,
                )?;
            }
        }
    }
    Ok(rec)
}

fn evaluate(cfg: &ExperimentConfig, split: Split, out: &Path, workers: usize) -> CliResult<StageRecord> {
    let mut rec = StageRecord::default();
    let corpus = open_corpus(cfg, &mut rec)?;
    let (model, fp) = load_checkpoint(cfg, Some(&corpus), &mut rec)?;
    let scenes = corpus.load_split(split)?;
    let ev = Evaluator {
        model: &model,
        checkpoint_fingerprint: fp,
        corpus_fingerprint: corpus.fingerprint().to_string(),
        scenes: &scenes,
        workers,
    };
    let report = ev.evaluate("model", &cfg.descent, &cfg.eval, Some(&out.join("meshes")))?;
    report.validate(scenes.len())?;
    write_file(&out.join("report.csv"), report.to_csv()?.as_bytes())?;
    write_file(&out.join("per_scene.csv"), report.per_scene_csv()?.as_bytes())?;
    if cfg.eval.track_steps {
        write_file(&out.join("steps.csv"), report.steps_csv()?.as_bytes())?;
    }
    write_file(&out.join("timing.csv"), report.timing_csv()?.as_bytes())?;
    write_file(&out.join("report.json"), &json_bytes(&report)?)?;
    if !cfg.eval.yaw_buckets.is_empty() {
        let yaw = ev.yaw_analysis(&cfg.eval.yaw_buckets, &cfg.descent, &cfg.eval)?;
        write_file(&out.join("yaw.csv"), yaw.to_csv()?.as_bytes())?;
        write_file(&out.join("yaw.json"), &json_bytes(&yaw)?)?;
    }
    Ok(rec)
}

fn sweep(cfg: &ExperimentConfig, split: Split, out: &Path, workers: usize) -> CliResult<StageRecord> {
    let mut rec = StageRecord::default();
    let corpus = open_corpus(cfg, &mut rec)?;
    let (model, fp) = load_checkpoint(cfg, Some(&corpus), &mut rec)?;
    let scenes = corpus.load_split(split)?;
    let ev = Evaluator {
        model: &model,
        checkpoint_fingerprint: fp,
        corpus_fingerprint: corpus.fingerprint().to_string(),
        scenes: &scenes,
        workers,
    };
    let report = ev.sweep_steps_clipping(&cfg.descent, &cfg.eval)?;
    write_file(&out.join("grid.csv"), report.grid_csv()?.as_bytes())?;
    write_file(&out.join("sweep_long.csv"), report.long_csv()?.as_bytes())?;
    write_file(&out.join("sweep_timing.csv"), report.timing_csv()?.as_bytes())?;
    write_file(&out.join("sweep.json"), &json_bytes(&report)?)?;
    Ok(rec)
}

/// Heatmap surrogates trained by `ablate`, keyed by the settings that shape them.
struct HeatmapCache<'a> {
    corpus: &'a Corpus,
    train: &'a [Scene],
    val: &'a [Scene],
    workers: usize,
    entries: Vec<(String, Vec<usize>, Vec<(String, Tensor)>)>,
}

impl HeatmapCache<'_> {
    fn get(&mut self, model: &ModelConfig, train: &TrainConfig) -> CliResult<(Vec<usize>, Vec<(String, Tensor)>)> {
        let key = fingerprint_json(&(
            model.num_keypoints,
            model.heatmap_channels,
            model.feature_res,
            model.norm_groups,
            model.in_channels,
            train,
        ));
        if let Some((_, ids, t)) = self.entries.iter().find(|(k, _, _)| *k == key) {
            return Ok((ids.clone(), t.clone()));
        }
        let ids = self.corpus.keypoints(model.num_keypoints)?.vertex_indices;
        eprintln!("training heatmap surrogate for K = {}", model.num_keypoints);
        let (_, store, _) = train_heatmap(self.train, self.val, &ids, model, train, self.workers)?;
        self.entries.push((key, ids.clone(), store.named_tensors()));
        Ok((ids, store.named_tensors()))
    }
}

fn ablate(cfg: &ExperimentConfig, split: Split, out: &Path, workers: usize) -> CliResult<StageRecord> {
    let mut rec = StageRecord::default();
    let corpus = open_corpus(cfg, &mut rec)?;
    let train = corpus.load_split(Split::Train)?;
    let val = corpus.load_split(Split::Val)?;
    let scenes = corpus.load_split(split)?;
    let encoder = match &cfg.artifacts.encoder {
        Some(_) => {
            let path = artifact(&cfg.artifacts.encoder, "encoder", ENCODER_FILE, "pretrain-sdf")?;
            rec.input(&path)?;
            Some(SdfEncoder::load(&path, Some(corpus.fingerprint()))?.store.named_tensors())
        }
        None => None,
    };
    let mut heatmaps = HeatmapCache {
        corpus: &corpus,
        train: &train,
        val: &val,
        workers,
        entries: Vec::new(),
    };
    let rows = ablation_rows(&cfg.model, &cfg.train, &cfg.descent);
    let ckpt_dir = out.join("checkpoints");
    let mut failure: Option<CliError> = None;
    let suite = ablation_suite(&rows, &scenes, corpus.fingerprint(), &cfg.eval, workers, &mut |row| {
        let mut run = || -> CliResult<(GlvdModel, String)> {
            eprintln!("ablation row {}", row.label);
            let mut model = new_model(&corpus, &row.model, row.train.seed)?;
            if model.heatmap_net().is_some() {
                let (ids, tensors) = heatmaps.get(&row.model, &cfg.train)?;
                attach_heatmap(&mut model, &ids, &tensors, Path::new("(ablation surrogate)"))?;
            }
            if let Some(t) = &encoder {
                model.load_encoder(t)?;
            }
            train_glvd(&train, &mut model, &row.train, workers, &mut log_epoch)?;
            let path = ckpt_dir.join(format!("{}.bin", row.label));
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::runtime(format!("{}: {e}", ckpt_dir.display())))?;
            model.save(&path, corpus.fingerprint(), serde_json::json!({ "train": row.train }))?;
            let fp = fingerprint_bytes(&std::fs::read(&path).map_err(|e| CliError::runtime(e.to_string()))?);
            Ok((model, fp))
        };
        run().map_err(|e| {
            let msg = e.message.clone();
            failure = Some(e);
            Error::Invalid(msg)
        })
    });
    let reports = match (suite, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    write_file(&out.join("comparison.csv"), comparison_csv(&reports)?.as_bytes())?;
    for r in &reports {
        let label = &r.rows[0].label;
        write_file(&out.join("rows").join(label).join("per_scene.csv"), r.per_scene_csv()?.as_bytes())?;
    }
    write_file(&out.join("rows.json"), &json_bytes(&rows)?)?;
    write_file(&out.join("reports.json"), &json_bytes(&reports)?)?;
    Ok(rec)
}
