use serde::{Deserialize, Serialize};

use super::linalg::{mat_t_vec, mat_vec, orthonormality_error, rot_y, sub, transpose, Mat3, Vec3, IDENTITY};
use super::mesh::Mesh;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Points with camera depth at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

/// Calibrated view: `x_cam = R p + t`, camera axes x right, y down, z forward.
/// Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub rotation: Mat3,
    pub translation: Vec3,
    /// `[C_in, H, W]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in {0, 1}.
    pub mask: Tensor,
    pub yaw_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    /// Coordinates in [−1, 1]² across the image (for feature lookup).
    pub norm: [f64; 2],
    pub behind: bool,
}

impl CameraView {
    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Camera(format!("focal lengths must be positive, got {} {}", k.fx, k.fy)));
        }
        let e = orthonormality_error(&self.rotation);
        if e > 1e-9 {
            return Err(Error::Camera(format!("rotation is not orthonormal (error {e:e})")));
        }
        let (ms, is) = (self.mask.shape(), self.image.shape());
        if ms.len() != 3 || ms[0] != 1 || is.len() != 3 || is[1..] != ms[1..] {
            return Err(Error::Camera(format!("image {is:?} and mask {ms:?} are not aligned")));
        }
        if self.mask.data().iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(Error::Camera("mask is not binary".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn from_camera(&self, c: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(c, self.translation))
    }

    /// Camera center in scene coordinates.
    pub fn center(&self) -> Vec3 {
        self.from_camera([0.0; 3])
    }
}

/// Pinhole projection of a scene point.
pub fn project(p: Vec3, view: &CameraView) -> Projection {
    let c = view.to_camera(p);
    project_camera(c, &view.intrinsics, view.width(), view.height())
}

/// Projection of a point already in camera coordinates.
pub fn project_camera(c: Vec3, k: &Intrinsics, width: usize, height: usize) -> Projection {
    let z = c[2];
    let behind = z <= MIN_DEPTH;
    let zs = if behind { MIN_DEPTH } else { z };
    let px = k.fx * c[0] / zs + k.cx;
    let py = k.fy * c[1] / zs + k.cy;
    Projection {
        pixel: [px, py],
        depth: z,
        norm: [2.0 * px / width as f64 - 1.0, 2.0 * py / height as f64 - 1.0],
        behind,
    }
}

/// Scene point on the ray through `pixel` at camera depth `depth`.
pub fn unproject(pixel: [f64; 2], depth: f64, view: &CameraView) -> Vec3 {
    let k = &view.intrinsics;
    let c = [
        (pixel[0] - k.cx) / k.fx * depth,
        (pixel[1] - k.cy) / k.fy * depth,
        depth,
    ];
    view.from_camera(c)
}

/// Jacobian of the normalized image coordinate with respect to the scene point.
/// Rows: (u, v); columns: (x, y, z).
pub fn projection_jacobian(p: Vec3, view: &CameraView) -> [[f64; 3]; 2] {
    let c = view.to_camera(p);
    let k = &view.intrinsics;
    let z = c[2].max(MIN_DEPTH);
    let (sw, sh) = (2.0 / view.width() as f64, 2.0 / view.height() as f64);
    // d(u)/d(c) in camera coordinates
    let du = [sw * k.fx / z, 0.0, -sw * k.fx * c[0] / (z * z)];
    let dv = [0.0, sh * k.fy / z, -sh * k.fy * c[1] / (z * z)];
    let r = &view.rotation;
    let mut j = [[0.0; 3]; 2];
    for a in 0..3 {
        j[0][a] = du[0] * r[0][a] + du[1] * r[1][a] + du[2] * r[2][a];
        j[1][a] = dv[0] * r[0][a] + dv[1] * r[1][a] + dv[2] * r[2][a];
    }
    j
}

/// Extrinsics of a camera orbiting the origin at `radius`, yawed about +y,
/// looking at the origin with scene +y up.
pub fn orbit_extrinsics(yaw_deg: f64, radius: f64) -> (Mat3, Vec3) {
    let front: Mat3 = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    // R = R_front · R_y(θ)ᵀ, so the camera sits at R_y(θ)·(0, 0, radius)
    let r = super::linalg::mat_mul(&front, &transpose(&rot_y(yaw_deg.to_radians())));
    (r, [0.0, 0.0, radius])
}

/// Uniform scale plus translation: `p' = scale · p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub translation: Vec3,
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity {
            scale: 1.0,
            translation: [0.0; 3],
        }
    }
}

impl Similarity {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        [
            self.scale * p[0] + self.translation[0],
            self.scale * p[1] + self.translation[1],
            self.scale * p[2] + self.translation[2],
        ]
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.translation[0]) / self.scale,
            (p[1] - self.translation[1]) / self.scale,
            (p[2] - self.translation[2]) / self.scale,
        ]
    }

    /// `self ∘ first`.
    pub fn after(&self, first: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * first.scale,
            translation: self.apply(first.translation),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.translation == [0.0; 3]
    }
}

/// One identity: ground-truth mesh plus its calibrated views.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gt_mesh: Mesh,
    pub views: Vec<CameraView>,
    pub identity_id: String,
    /// Maps the original (millimetre) frame to the current frame.
    pub normalization: Similarity,
}

/// Half-width of the cube that normalized scenes occupy.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.95;

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Invalid(format!("scene {} has no views", self.identity_id)));
        }
        self.gt_mesh.validate()?;
        for v in &self.views {
            v.validate()?;
        }
        Ok(())
    }

    /// Whether every vertex lies inside the normalized cube.
    pub fn is_normalized(&self) -> bool {
        self.gt_mesh
            .vertices
            .iter()
            .all(|v| v.iter().all(|x| x.abs() <= NORMALIZED_HALF_EXTENT + 1e-12))
    }
}

/// Similarity that fits `mesh` into `[−0.95, 0.95]³`, or the identity if it
/// already fits.
pub fn normalization_for(mesh: &Mesh) -> Result<Similarity> {
    if mesh.vertices.is_empty() {
        return Err(Error::Mesh("cannot normalize an empty mesh".into()));
    }
    let (lo, hi) = mesh.bounds();
    let half = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
    if half <= 0.0 {
        return Err(Error::Mesh("mesh has zero extent".into()));
    }
    let fits = lo.iter().chain(&hi).all(|x| x.abs() <= NORMALIZED_HALF_EXTENT + 1e-12);
    if fits {
        return Ok(Similarity::default());
    }
    let s = NORMALIZED_HALF_EXTENT / half;
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    Ok(Similarity {
        scale: s,
        translation: [-s * c[0], -s * c[1], -s * c[2]],
    })
}

/// Re-pose a camera so that projections are unchanged after `sim` is applied
/// to the scene.
pub fn transform_view(view: &CameraView, sim: &Similarity) -> CameraView {
    let rt = mat_vec(&view.rotation, sim.translation);
    let mut out = view.clone();
    out.translation = [
        sim.scale * view.translation[0] - rt[0],
        sim.scale * view.translation[1] - rt[1],
        sim.scale * view.translation[2] - rt[2],
    ];
    out
}

/// Apply the fitting similarity to the mesh and every camera, and record it.
pub fn normalize_scene(scene: &Scene) -> Result<Scene> {
    let sim = normalization_for(&scene.gt_mesh)?;
    if sim.is_identity() {
        return Ok(scene.clone());
    }
    let vertices = scene.gt_mesh.vertices.iter().map(|v| sim.apply(*v)).collect();
    Ok(Scene {
        gt_mesh: scene.gt_mesh.with_vertices(vertices),
        views: scene.views.iter().map(|v| transform_view(v, &sim)).collect(),
        identity_id: scene.identity_id.clone(),
        normalization: sim.after(&scene.normalization),
    })
}

/// A view with an identity camera, for tests and single-image inputs.
pub fn identity_camera(intrinsics: Intrinsics, image: Tensor, mask: Tensor) -> CameraView {
    CameraView {
        intrinsics,
        rotation: IDENTITY,
        translation: [0.0; 3],
        image,
        mask,
        yaw_deg: 0.0,
    }
}
