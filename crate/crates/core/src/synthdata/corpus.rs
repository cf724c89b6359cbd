//! Corpus generation and the on-disk layout.
//!
//! ```text
//! <root>/corpus.json
//! <root>/template.ply
//! <root>/<split>/<identity>/mesh.ply
//! <root>/<split>/<identity>/meta.json
//! <root>/<split>/<identity>/view_<i>.bin
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_view, RenderConfig};
use super::template::{generate_identity, IdentityBasis, IdentityParams, Template};
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint_json;
use crate::geometry::io::{read_ply, write_ply};
use crate::geometry::linalg::{add, scale, Mat3, Vec3};
use crate::geometry::{normalization_for, select_keypoints, CameraView, Intrinsics, KeypointSelection, Mesh, Scene, Similarity};
use crate::tensor::{read_tensor_file, write_tensor_file, TensorFile};

pub const CORPUS_FORMAT: &str = "glvd-corpus-v1";

/// Keypoints are drawn from template vertices whose direction has at least
/// this forward (+z) component, i.e. the facial region.
const FACE_REGION_MIN_Z: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub view_angles: Vec<f64>,
    /// Quads per cube face of the template grid.
    pub template_resolution: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let r = RenderConfig::default();
        CorpusConfig {
            seed: 0,
            n_train: 100,
            n_val: 10,
            n_test: 10,
            image_size: r.image_size,
            view_angles: r.view_angles,
            template_resolution: 10,
        }
    }
}

impl CorpusConfig {
    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            image_size: self.image_size,
            view_angles: self.view_angles.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.render().validate()?;
        if self.view_angles.is_empty() {
            return Err(Error::Config("view_angles must not be empty".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Global identity index of the first identity in `split`.
    fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.n_train,
            Split::Test => self.n_train + self.n_val,
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_json(&(CORPUS_FORMAT, self))
    }
}

/// Per-identity RNG seed (SplitMix64 finalizer over seed and index).
pub fn identity_seed(corpus_seed: u64, index: usize) -> u64 {
    let mut z = corpus_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub yaw_deg: f64,
    pub intrinsics: Intrinsics,
    pub rotation: Mat3,
    pub translation: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub identity_id: String,
    pub split: Split,
    pub coeffs: Vec<f64>,
    /// Millimetre frame → normalized frame.
    pub normalization: Similarity,
    pub views: Vec<ViewMeta>,
}

#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub params: IdentityParams,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub fingerprint: String,
    pub config: CorpusConfig,
    pub template_topology: String,
    pub identities: Vec<(Split, Vec<String>)>,
    /// Per-vertex mean of the normalized training meshes.
    pub mean_template: Vec<Vec3>,
}

fn identity_name(split: Split, i: usize) -> String {
    format!("{}_{i:04}", split.name())
}

/// Generate identity `i` of `split`: sample coefficients, deform the
/// template, normalize, and render every configured yaw.
pub fn generate_scene(
    cfg: &CorpusConfig,
    split: Split,
    i: usize,
    template: &Template,
    basis: &IdentityBasis,
) -> Result<GeneratedScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed(cfg.seed, cfg.offset(split) + i));
    let params = IdentityParams::sample(basis.dims(), &mut rng);
    let mm = generate_identity(&params, template, basis)?;
    let sim = normalization_for(&mm)?;
    let mesh = mm.with_vertices(mm.vertices.iter().map(|v| sim.apply(*v)).collect());
    let render = cfg.render();
    let views = cfg.view_angles.iter().map(|y| render_view(&mesh, *y, &render)).collect();
    Ok(GeneratedScene {
        scene: Scene {
            gt_mesh: mesh,
            views,
            identity_id: identity_name(split, i),
            normalization: sim,
        },
        params,
        split,
    })
}

pub fn write_view(path: &Path, view: &CameraView, fingerprint: &str) -> Result<()> {
    let mut f = TensorFile::new(fingerprint);
    f.meta = serde_json::to_value(ViewMeta {
        yaw_deg: view.yaw_deg,
        intrinsics: view.intrinsics,
        rotation: view.rotation,
        translation: view.translation,
    })?;
    f.tensors.push(("image".into(), view.image.clone()));
    f.tensors.push(("mask".into(), view.mask.clone()));
    write_tensor_file(path, &f)
}

pub fn read_view(path: &Path, expected_fingerprint: Option<&str>) -> Result<CameraView> {
    let f = read_tensor_file(path, expected_fingerprint)?;
    let corrupt = |detail: &str| Error::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let meta: ViewMeta = serde_json::from_value(f.meta.clone()).map_err(|e| corrupt(&format!("view metadata: {e}")))?;
    let image = f.get("image").ok_or_else(|| corrupt("missing `image` tensor"))?.clone();
    let mask = f.get("mask").ok_or_else(|| corrupt("missing `mask` tensor"))?.clone();
    if image.shape().len() != 3 || mask.shape().len() != 3 || image.shape()[1..] != mask.shape()[1..] || mask.shape()[0] != 1 {
        return Err(corrupt(&format!("image {:?} and mask {:?} are not aligned", image.shape(), mask.shape())));
    }
    let view = CameraView {
        intrinsics: meta.intrinsics,
        rotation: meta.rotation,
        translation: meta.translation,
        image,
        mask,
        yaw_deg: meta.yaw_deg,
    };
    view.validate().map_err(|e| corrupt(&e.to_string()))?;
    Ok(view)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write_scene(dir: &Path, g: &GeneratedScene, fingerprint: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ply(&dir.join("mesh.ply"), &g.scene.gt_mesh)?;
    for (i, v) in g.scene.views.iter().enumerate() {
        write_view(&dir.join(format!("view_{i}.bin")), v, fingerprint)?;
    }
    let meta = SceneMeta {
        identity_id: g.scene.identity_id.clone(),
        split: g.split,
        coeffs: g.params.coeffs.clone(),
        normalization: g.scene.normalization,
        views: g
            .scene
            .views
            .iter()
            .map(|v| ViewMeta {
                yaw_deg: v.yaw_deg,
                intrinsics: v.intrinsics,
                rotation: v.rotation,
                translation: v.translation,
            })
            .collect(),
    };
    write_json(&dir.join("meta.json"), &meta)
}

/// Generate every identity (in parallel over `workers` threads) and write the
/// corpus under `root`. Output bytes do not depend on `workers`.
pub fn generate_corpus(root: &Path, cfg: &CorpusConfig, workers: usize) -> Result<CorpusManifest> {
    cfg.validate()?;
    let template = Template::new(cfg.template_resolution)?;
    let basis = IdentityBasis::new(&template);
    let fingerprint = cfg.fingerprint();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_ply(&root.join("template.ply"), &template.mesh)?;
    let workers = workers.max(1);
    let mut identities = Vec::new();
    let mut sum = vec![[0.0; 3]; template.mesh.vertices.len()];
    for split in Split::ALL {
        let n = cfg.size(split);
        let mut names = Vec::with_capacity(n);
        for chunk in (0..n).collect::<Vec<_>>().chunks(workers) {
            let scenes: Vec<Result<GeneratedScene>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|i| {
                        let (t, b) = (&template, &basis);
                        s.spawn(move || generate_scene(cfg, split, *i, t, b))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
            });
            for g in scenes {
                let g = g?;
                let dir = root.join(split.name()).join(&g.scene.identity_id);
                write_scene(&dir, &g, &fingerprint)?;
                if split == Split::Train {
                    for (acc, v) in sum.iter_mut().zip(&g.scene.gt_mesh.vertices) {
                        *acc = add(*acc, *v);
                    }
                }
                names.push(g.scene.identity_id);
            }
        }
        identities.push((split, names));
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.to_string(),
        fingerprint,
        config: cfg.clone(),
        template_topology: template.mesh.topology_id(),
        identities,
        mean_template: sum.into_iter().map(|s| scale(s, 1.0 / cfg.n_train as f64)).collect(),
    };
    write_json(&root.join("corpus.json"), &manifest)?;
    Ok(manifest)
}

/// A generated corpus opened from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub template: Template,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Corpus> {
        let path = root.join("corpus.json");
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                hint: "gen-corpus".into(),
            });
        }
        let manifest: CorpusManifest = read_json(&path)?;
        if manifest.format != CORPUS_FORMAT {
            return Err(Error::Corrupt {
                path,
                detail: format!("unknown corpus format `{}`", manifest.format),
            });
        }
        let template = Template::new(manifest.config.template_resolution)?;
        if template.mesh.topology_id() != manifest.template_topology {
            return Err(Error::Corrupt {
                path,
                detail: "template topology does not match this build".into(),
            });
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
            template,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.manifest
            .identities
            .iter()
            .find(|(s, _)| *s == split)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn scene_dir(&self, split: Split, id: &str) -> PathBuf {
        self.root.join(split.name()).join(id)
    }

    pub fn load_meta(&self, split: Split, id: &str) -> Result<SceneMeta> {
        read_json(&self.scene_dir(split, id).join("meta.json"))
    }

    pub fn load_scene(&self, split: Split, id: &str) -> Result<Scene> {
        let dir = self.scene_dir(split, id);
        let meta = self.load_meta(split, id)?;
        let gt_mesh = read_ply(&dir.join("mesh.ply"))?;
        let views = (0..meta.views.len())
            .map(|i| read_view(&dir.join(format!("view_{i}.bin")), Some(self.fingerprint())))
            .collect::<Result<Vec<_>>>()?;
        let scene = Scene {
            gt_mesh,
            views,
            identity_id: meta.identity_id,
            normalization: meta.normalization,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Scene>> {
        self.ids(split).iter().map(|id| self.load_scene(split, id)).collect()
    }

    /// Mean training shape on the template topology.
    pub fn mean_template(&self) -> Mesh {
        self.template.mesh.with_vertices(self.manifest.mean_template.clone())
    }

    /// `k` facial keypoints chosen by farthest-point sampling on the template.
    /// Selections for different `k` share their leading entries.
    pub fn keypoints(&self, k: usize) -> Result<KeypointSelection> {
        face_keypoints(&self.template, k, self.manifest.config.seed)
    }
}

/// Farthest-point keypoints restricted to the facial region of the template.
pub fn face_keypoints(template: &Template, k: usize, seed: u64) -> Result<KeypointSelection> {
    let region: Vec<usize> = (0..template.dirs.len())
        .filter(|i| template.dirs[*i][2] >= FACE_REGION_MIN_Z)
        .collect();
    let pts = Mesh {
        vertices: region.iter().map(|i| template.mesh.vertices[*i]).collect(),
        faces: vec![],
    };
    let sel = select_keypoints(&pts, k, seed)?;
    Ok(KeypointSelection {
        vertex_indices: sel.vertex_indices.iter().map(|i| region[*i]).collect(),
    })
}
