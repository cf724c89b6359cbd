//! Procedural head corpus: identity meshes on a shared template topology,
//! rendered depth/normal/silhouette views, augmentation and mirroring.

mod augment;
mod corpus;
mod render;
mod template;

pub use augment::{augment, augment_with, AugmentParams};
pub use corpus::{
    generate_corpus, generate_scene, identity_seed, read_view, write_view, Corpus, CorpusConfig, CorpusManifest,
    face_keypoints, GeneratedScene, SceneMeta, Split, ViewMeta, CORPUS_FORMAT,
};
pub use render::{
    default_intrinsics, depth_buffer, depth_quantum, render_view, DepthBuffer, RenderConfig, CHANNELS, DEPTH_FAR,
    DEPTH_NEAR, FOCAL_FACTOR, ORBIT_RADIUS, SILHOUETTE,
};
pub use template::{generate_identity, IdentityBasis, IdentityParams, Template, COEFF_LIMIT, IDENTITY_DIMS};

use crate::error::{Error, Result};
use crate::geometry::linalg::{mat_t_vec, mat_vec, sub, transpose, Mat3, Vec3};
use crate::geometry::{orbit_extrinsics, CameraView, Scene, Similarity};
use crate::tensor::Tensor;

const MIRROR: Mat3 = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mirror_point(p: Vec3) -> Vec3 {
    [-p[0], p[1], p[2]]
}

/// Flip a `[C, H, W]` image left-right.
fn flip_columns(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + w - 1 - x];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// The camera that sees the x-mirrored world as the mirror image of what
/// `view` sees.
pub fn mirror_view(view: &CameraView) -> CameraView {
    let r = &view.rotation;
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = MIRROR[i][i] * r[i][j] * MIRROR[j][j];
        }
    }
    let mut image = flip_columns(&view.image);
    if image.shape()[0] > 1 {
        // camera-frame normal x
        let hw = image.shape()[1] * image.shape()[2];
        for v in &mut image.data_mut()[hw..2 * hw] {
            *v = -*v;
        }
    }
    let mut k = view.intrinsics;
    k.cx = view.width() as f64 - k.cx;
    CameraView {
        intrinsics: k,
        rotation: rot,
        translation: mirror_point(view.translation),
        image,
        mask: flip_columns(&view.mask),
        yaw_deg: -view.yaw_deg,
    }
}

/// Mirror a scene about the `x = 0` plane.
///
/// Vertex `i` of the result is the reflection of vertex `mirror[i]`, so the
/// face list (and with it the topology id and the outward winding) is kept
/// when the template triangulation is itself mirror-symmetric.
pub fn symmetrize(scene: &Scene, mirror: &[usize]) -> Result<Scene> {
    let n = scene.gt_mesh.vertices.len();
    if mirror.len() != n || mirror.iter().any(|m| *m >= n) {
        return Err(Error::Invalid(format!(
            "mirror map of length {} does not fit a {n}-vertex mesh",
            mirror.len()
        )));
    }
    let v = &scene.gt_mesh.vertices;
    let vertices = mirror.iter().map(|m| mirror_point(v[*m])).collect();
    let s = &scene.normalization;
    Ok(Scene {
        gt_mesh: scene.gt_mesh.with_vertices(vertices),
        views: scene.views.iter().map(mirror_view).collect(),
        identity_id: format!("{}~sym", scene.identity_id),
        normalization: Similarity {
            scale: s.scale,
            translation: mirror_point(s.translation),
        },
    })
}

/// Front orbit camera (yaw 0) used as the single-view reference pose.
pub fn reference_extrinsics() -> (Mat3, Vec3) {
    orbit_extrinsics(0.0, ORBIT_RADIUS)
}

/// Rigid map from scene coordinates to the reference frame of `view`: the
/// frame in which `view` has the reference extrinsics.
pub fn view_frame(view: &CameraView) -> (Mat3, Vec3) {
    let (r0, t0) = reference_extrinsics();
    let r0t = transpose(&r0);
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = (0..3).map(|k| r0t[i][k] * view.rotation[k][j]).sum();
        }
    }
    (rot, mat_t_vec(&r0, sub(view.translation, t0)))
}

/// Re-express a single view of `scene` in that camera's reference frame, as
/// used for single-view reconstruction. The normalization scale is kept
/// since the map is rigid.
pub fn single_view_scene(scene: &Scene, view_index: usize) -> Result<Scene> {
    let view = scene
        .views
        .get(view_index)
        .ok_or_else(|| Error::Invalid(format!("scene has {} views, asked for {view_index}", scene.views.len())))?;
    let (rot, t) = view_frame(view);
    let map = |p: Vec3| {
        let q = mat_vec(&rot, p);
        [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
    };
    let (r0, t0) = reference_extrinsics();
    let mut v = view.clone();
    v.rotation = r0;
    v.translation = t0;
    Ok(Scene {
        gt_mesh: scene.gt_mesh.with_vertices(scene.gt_mesh.vertices.iter().map(|p| map(*p)).collect()),
        views: vec![v],
        identity_id: scene.identity_id.clone(),
        normalization: scene.normalization,
    })
}
