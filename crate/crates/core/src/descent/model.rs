//! The GLVD network: encoders plus the keypoint and vertex descent heads.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{distance_encoding, relative_encoding, repeated_keypoints};
use crate::config::{EncodingMode, ModelConfig};
use crate::encoder::{input_planes, project_points, sample_descriptor, FeatureMaps, FeatureNet, FusionNet, HeatmapNet};
use crate::error::{Error, Result};
use crate::geometry::{CameraView, Mesh, Vec3};
use crate::tensor::nn::{Linear, Mlp};
use crate::tensor::{read_tensor_file, write_tensor_file, ParamStore, Tape, Tensor, TensorFile, Var};

pub const MODEL_FORMAT: &str = "glvd-model-v1";

/// Which outputs of a head's last layer to compute.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    /// Every target: `[P, 3T]`.
    Full,
    /// Query `p` keeps target `p` only: `[P, 3]`. Needs `P = T`.
    Diagonal,
    /// The listed targets for every query: `[P, 3·len]`.
    Targets(Vec<usize>),
}

impl HeadOutput {
    fn columns(&self, queries: usize, targets: usize) -> Result<Option<(Vec<usize>, usize)>> {
        match self {
            HeadOutput::Full => Ok(None),
            HeadOutput::Diagonal => {
                if queries != targets {
                    return Err(Error::shape(
                        "descent head",
                        format!("diagonal output needs one query per target, got {queries} for {targets}"),
                    ));
                }
                Ok(Some(((0..3 * queries).collect(), 3)))
            }
            HeadOutput::Targets(ids) => {
                if let Some(bad) = ids.iter().find(|i| **i >= targets) {
                    return Err(Error::Invalid(format!("target {bad} out of range for {targets}")));
                }
                let row: Vec<usize> = ids.iter().flat_map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
                let width = row.len();
                Ok(Some((row.repeat(queries), width)))
            }
        }
    }
}

/// Encoded evidence of one view: vertex feature maps and, with a keypoint
/// branch, the fused keypoint feature map.
#[derive(Clone, Debug)]
pub struct ViewFeatures {
    pub view: CameraView,
    pub maps: FeatureMaps,
    pub keypoint_map: Option<Var>,
}

/// Training-time binary dropout on vertex descriptors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
}

/// One self-attention block over all queries with a residual connection.
#[derive(Clone, Debug)]
struct GlobalAttention {
    q: Linear,
    k: Linear,
    v: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    model: ModelConfig,
    keypoints: Vec<usize>,
    faces: Vec<[u32; 3]>,
    extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct GlvdModel {
    pub cfg: ModelConfig,
    /// Trainable parameters: f_v, f_s, g_k, g_v and attention layers.
    pub store: ParamStore,
    /// The keypoint heatmap surrogate, always frozen.
    pub heatmap_store: ParamStore,
    /// Starting mesh of every descent, on the output topology.
    pub template: Mesh,
    /// Template vertices that act as the guiding keypoints.
    pub keypoint_ids: Vec<usize>,
    fv: FeatureNet,
    heatmap: Option<HeatmapNet>,
    fusion: Option<FusionNet>,
    gk: Option<Mlp>,
    gv: Mlp,
    score: Option<Mlp>,
    global: Option<GlobalAttention>,
}

impl GlvdModel {
    pub fn new(cfg: &ModelConfig, template: Mesh, keypoint_ids: Vec<usize>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = template.vertices.len();
        let uses_k = cfg.encoding.uses_keypoints();
        if uses_k && keypoint_ids.len() != cfg.num_keypoints {
            return Err(Error::Config(format!(
                "{} keypoint vertices for num_keypoints = {}",
                keypoint_ids.len(),
                cfg.num_keypoints
            )));
        }
        if let Some(bad) = keypoint_ids.iter().find(|i| **i >= n) {
            return Err(Error::Config(format!("keypoint vertex {bad} outside a {n}-vertex template")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut heatmap_store = ParamStore::new();
        let fv = FeatureNet::new(&mut store, cfg, &mut rng);
        let k = cfg.num_keypoints;
        let (heatmap, fusion, gk) = if uses_k {
            let hm = cfg.heatmap_prior.then(|| HeatmapNet::new(&mut heatmap_store, cfg, &mut rng));
            let fs = FusionNet::new(&mut store, cfg, &mut rng);
            let h = cfg.gk_hidden;
            let gk = Mlp::new(&mut store, "g_k", &[3 + cfg.keypoint_channels, h, h, 3 * k], false, &mut rng);
            (hm, Some(fs), Some(gk))
        } else {
            (None, None, None)
        };
        heatmap_store.freeze();
        let d = cfg.descriptor_dim();
        let pos = if cfg.include_vertex_pos { 3 } else { 0 };
        let h = cfg.gv_hidden;
        let gv_in = pos + d + cfg.encoding.payload_dim(k);
        let gv = Mlp::new(&mut store, "g_v", &[gv_in, h, h, 3 * n], true, &mut rng);
        let score = (cfg.encoding == EncodingMode::Attention)
            .then(|| Mlp::new(&mut store, "attention_score", &[d + k, cfg.attention_hidden, k], false, &mut rng));
        let global = cfg.global_attention.then(|| GlobalAttention {
            q: Linear::new(&mut store, "global_attention.q", h, cfg.attention_hidden, &mut rng),
            k: Linear::new(&mut store, "global_attention.k", h, cfg.attention_hidden, &mut rng),
            v: Linear::new(&mut store, "global_attention.v", h, h, &mut rng),
        });
        Ok(GlvdModel {
            cfg: cfg.clone(),
            store,
            heatmap_store,
            template,
            keypoint_ids: if uses_k { keypoint_ids } else { Vec::new() },
            fv,
            heatmap,
            fusion,
            gk,
            gv,
            score,
            global,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.template.vertices.len()
    }

    pub fn num_keypoints(&self) -> usize {
        if self.cfg.encoding.uses_keypoints() {
            self.cfg.num_keypoints
        } else {
            0
        }
    }

    pub fn has_keypoint_branch(&self) -> bool {
        self.gk.is_some()
    }

    pub fn feature_net(&self) -> &FeatureNet {
        &self.fv
    }

    pub fn heatmap_net(&self) -> Option<&HeatmapNet> {
        self.heatmap.as_ref()
    }

    /// Input planes of `view` at the feature resolution.
    pub fn planes(&self, view: &CameraView) -> Result<Tensor> {
        input_planes(&view.image, &view.mask, self.cfg.feature_res)
    }

    pub fn encode_view(&self, tape: &mut Tape, view: &CameraView) -> Result<ViewFeatures> {
        let planes = tape.constant(self.planes(view)?);
        let maps = self.fv.forward_planes(tape, &self.store, planes)?;
        let keypoint_map = match &self.fusion {
            Some(fs) => {
                let heat = match &self.heatmap {
                    Some(hm) => Some(hm.forward(tape, &self.heatmap_store, planes)?),
                    None => None,
                };
                Some(fs.forward(tape, &self.store, planes, heat, maps.per_stack[0])?)
            }
            None => None,
        };
        Ok(ViewFeatures {
            view: view.clone(),
            maps,
            keypoint_map,
        })
    }

    pub fn encode_views(&self, tape: &mut Tape, views: &[CameraView]) -> Result<Vec<ViewFeatures>> {
        views.iter().map(|v| self.encode_view(tape, v)).collect()
    }

    /// Layers one and two per view, mean over views, then the output layer.
    fn head(
        &self,
        tape: &mut Tape,
        mlp: &Mlp,
        inputs: &[Var],
        queries: usize,
        targets: usize,
        out: &HeadOutput,
    ) -> Result<Var> {
        let mut hs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let h = mlp.layer(0, tape, &self.store, *x)?;
            hs.push(mlp.layer(1, tape, &self.store, h)?);
        }
        let mut h = tape.mean_of(&hs)?;
        if let (Some(ga), true) = (&self.global, std::ptr::eq(mlp, &self.gv)) {
            let q = ga.q.forward(tape, &self.store, h)?;
            let k = ga.k.forward(tape, &self.store, h)?;
            let v = ga.v.forward(tape, &self.store, h)?;
            let a = tape.self_attention(q, k, v)?;
            h = tape.add(h, a)?;
        }
        match out.columns(queries, targets)? {
            None => mlp.layer(2, tape, &self.store, h),
            Some((cols, width)) => {
                let (w, b) = mlp.layers[2].weights(tape, &self.store)?;
                tape.linear_gather(h, w, b, cols, width)
            }
        }
    }

    /// Raw vertex displacements for `queries` toward the template vertices.
    /// `keypoints` feed the encoding and are ignored in `none` mode.
    pub fn vertex_head(
        &self,
        tape: &mut Tape,
        feats: &[ViewFeatures],
        queries: &[Vec3],
        keypoints: &[Vec3],
        out: &HeadOutput,
        dropout: Option<Dropout>,
    ) -> Result<Var> {
        if feats.is_empty() {
            return Err(Error::Invalid("vertex descent needs at least one view".into()));
        }
        let mode = self.cfg.encoding;
        let p = queries.len();
        let k = self.num_keypoints();
        if mode.uses_keypoints() && keypoints.len() != k {
            return Err(Error::shape("g_v", format!("{} keypoints for a {k}-keypoint model", keypoints.len())));
        }
        let pos = self
            .cfg
            .include_vertex_pos
            .then(|| Tensor::new(vec![p, 3], queries.iter().flatten().copied().collect()))
            .transpose()?;
        let payload = match mode {
            EncodingMode::Relative => Some(Tensor::new(vec![p, 3 * k], relative_encoding(queries, keypoints))?),
            EncodingMode::Concat => Some(Tensor::new(vec![p, 3 * k], repeated_keypoints(p, keypoints))?),
            EncodingMode::Norm => Some(Tensor::new(vec![p, k], distance_encoding(queries, keypoints))?),
            EncodingMode::Attention | EncodingMode::None => None,
        };
        let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
        let mut inputs = Vec::with_capacity(feats.len());
        for f in feats {
            let (coords, behind) = project_points(queries, &f.view);
            let mut desc = sample_descriptor(tape, &f.maps, &coords, &behind)?;
            if let (Some(d), Some(rng)) = (dropout, rng.as_mut()) {
                if d.p > 0.0 {
                    let keep = 1.0 / (1.0 - d.p);
                    let n = tape.value(desc).numel();
                    let mask = (0..n).map(|_| if rng.random::<f64>() < d.p { 0.0 } else { keep }).collect();
                    desc = tape.mul_const(desc, mask)?;
                }
            }
            let mut parts = Vec::with_capacity(3);
            if let Some(t) = &pos {
                parts.push(tape.constant(t.clone()));
            }
            parts.push(desc);
            if let Some(t) = &payload {
                parts.push(tape.constant(t.clone()));
            }
            if mode == EncodingMode::Attention {
                let score = self.score.as_ref().expect("attention model has a scoring MLP");
                let dist = tape.constant(Tensor::new(vec![p, k], distance_encoding(queries, keypoints))?);
                let s_in = tape.concat_cols(&[desc, dist])?;
                let logits = score.forward(tape, &self.store, s_in)?;
                let w = tape.softmax_rows(logits)?;
                let rel = tape.constant(Tensor::new(vec![p, 3 * k], relative_encoding(queries, keypoints))?);
                parts.push(tape.weighted_rel_sum(w, rel)?);
            }
            inputs.push(if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? });
        }
        self.head(tape, &self.gv, &inputs, p, self.n_vertices(), out)
    }

    /// Raw keypoint displacements for `queries` toward the K keypoints.
    pub fn keypoint_head(&self, tape: &mut Tape, feats: &[ViewFeatures], queries: &[Vec3], out: &HeadOutput) -> Result<Var> {
        let gk = self
            .gk
            .as_ref()
            .ok_or_else(|| Error::Config("this model has no keypoint branch".into()))?;
        if feats.is_empty() {
            return Err(Error::Invalid("keypoint descent needs at least one view".into()));
        }
        let p = queries.len();
        let pos = Tensor::new(vec![p, 3], queries.iter().flatten().copied().collect())?;
        let mut inputs = Vec::with_capacity(feats.len());
        for f in feats {
            let map = f
                .keypoint_map
                .ok_or_else(|| Error::Config("view encoded without keypoint features".into()))?;
            let (coords, behind) = project_points(queries, &f.view);
            let desc = crate::encoder::sample_maps(tape, &[map], &coords, &behind)?;
            let x = tape.constant(pos.clone());
            inputs.push(tape.concat_cols(&[x, desc])?);
        }
        self.head(tape, gk, &inputs, p, self.cfg.num_keypoints, out)
    }

    /// Copy `f_v.*` weights from a pretrained encoder.
    pub fn load_encoder(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let fv: Vec<(String, Tensor)> = tensors.iter().filter(|(n, _)| n.starts_with("f_v.")).cloned().collect();
        let mut sub = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = FeatureNet::new(&mut sub, &self.cfg, &mut rng);
        sub.load_named(&fv)?;
        for (name, t) in sub.named_tensors() {
            let id = self.store.find(&name).expect("same architecture");
            self.store.get_mut(id).value = t;
        }
        Ok(())
    }

    /// Overwrite the frozen heatmap surrogate.
    pub fn load_heatmap(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        self.heatmap_store.load_named(tensors)
    }

    pub fn to_file(&self, fingerprint: &str, extra: serde_json::Value) -> Result<TensorFile> {
        let meta = ModelMeta {
            format: MODEL_FORMAT.into(),
            model: self.cfg.clone(),
            keypoints: self.keypoint_ids.clone(),
            faces: self.template.faces.clone(),
            extra,
        };
        let mut file = TensorFile::new(fingerprint);
        file.meta = serde_json::to_value(meta)?;
        file.tensors.push((
            "template.vertices".into(),
            Tensor::new(vec![self.n_vertices(), 3], self.template.vertices.iter().flatten().copied().collect())?,
        ));
        file.tensors.extend(self.store.named_tensors());
        file.tensors.extend(self.heatmap_store.named_tensors());
        Ok(file)
    }

    pub fn save(&self, path: &Path, fingerprint: &str, extra: serde_json::Value) -> Result<()> {
        write_tensor_file(path, &self.to_file(fingerprint, extra)?)
    }

    pub fn from_file(file: &TensorFile, path: &Path) -> Result<Self> {
        let corrupt = |m: String| Error::Corrupt {
            path: path.to_path_buf(),
            detail: m,
        };
        let meta: ModelMeta =
            serde_json::from_value(file.meta.clone()).map_err(|e| corrupt(format!("model header: {e}")))?;
        if meta.format != MODEL_FORMAT {
            return Err(corrupt(format!("format `{}` is not {MODEL_FORMAT}", meta.format)));
        }
        let verts = file
            .get("template.vertices")
            .ok_or_else(|| corrupt("missing template.vertices".into()))?;
        let template = Mesh::new(
            verts.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            meta.faces.clone(),
        )?;
        let mut model = GlvdModel::new(&meta.model, template, meta.keypoints.clone(), 0)?;
        model.store.load_named(&file.tensors)?;
        model.heatmap_store.load_named(&file.tensors)?;
        Ok(model)
    }

    /// Load a checkpoint; `expected` rejects a different architecture.
    pub fn load(path: &Path, fingerprint: Option<&str>, expected: Option<&ModelConfig>) -> Result<(Self, serde_json::Value)> {
        let file = read_tensor_file(path, fingerprint)?;
        let model = Self::from_file(&file, path)?;
        if let Some(cfg) = expected {
            if *cfg != model.cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration (encoding `{}`, requested `{}`)",
                    path.display(),
                    model.cfg.encoding.name(),
                    cfg.encoding.name()
                )));
            }
        }
        let extra = file.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }
}
