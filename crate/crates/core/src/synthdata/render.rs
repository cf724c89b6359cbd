//! Z-buffered software rasterizer producing depth / normal / silhouette channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::linalg::{add, cross, dot, normalize, scale, sub, Vec3};
use crate::geometry::{orbit_extrinsics, CameraView, Intrinsics, Mesh};
use crate::tensor::Tensor;

/// Camera orbit radius around the origin.
pub const ORBIT_RADIUS: f64 = 2.5;
/// Focal length as a fraction of the image width.
pub const FOCAL_FACTOR: f64 = 0.8;
/// Depth range mapped to (0, 1] in the depth channel.
pub const DEPTH_NEAR: f64 = 1.0;
pub const DEPTH_FAR: f64 = 4.0;
/// Image channels: depth, normal x/y/z (camera frame), silhouette.
pub const CHANNELS: usize = 5;
pub const SILHOUETTE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub image_size: usize,
    pub view_angles: Vec<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_size: 64,
            view_angles: vec![0.0, 30.0, -30.0, 60.0, -60.0, 90.0, -90.0, 180.0],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be ≥ 16, got {}", self.image_size)));
        }
        if let Some(a) = self.view_angles.iter().find(|a| !(a.abs() <= 180.0)) {
            return Err(Error::Config(format!("yaw {a} outside [−180, 180]")));
        }
        Ok(())
    }
}

pub fn default_intrinsics(size: usize) -> Intrinsics {
    let f = FOCAL_FACTOR * size as f64;
    let c = size as f64 / 2.0;
    Intrinsics { fx: f, fy: f, cx: c, cy: c }
}

/// Per-pixel camera depth (∞ on background) and owning face.
#[derive(Clone, Debug)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub face: Vec<Option<u32>>,
}

struct Rendered {
    buffer: DepthBuffer,
    normals: Vec<Vec3>,
}

fn rasterize(mesh: &Mesh, view_rot: &[[f64; 3]; 3], view_t: Vec3, k: &Intrinsics, w: usize, h: usize) -> Rendered {
    let cam: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|p| add(crate::geometry::linalg::mat_vec(view_rot, *p), view_t))
        .collect();
    let vn: Vec<Vec3> = mesh
        .vertex_normals()
        .iter()
        .map(|n| crate::geometry::linalg::mat_vec(view_rot, *n))
        .collect();
    let mut depth = vec![f64::INFINITY; w * h];
    let mut face = vec![None; w * h];
    let mut normals = vec![[0.0; 3]; w * h];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let c = [cam[f[0] as usize], cam[f[1] as usize], cam[f[2] as usize]];
        if c.iter().any(|p| p[2] <= 1e-3) {
            continue;
        }
        // back-face culling against the viewing ray
        if dot(cross(sub(c[1], c[0]), sub(c[2], c[0])), c[0]) >= 0.0 {
            continue;
        }
        let s: Vec<[f64; 2]> = c.iter().map(|p| [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy]).collect();
        let area = (s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[1][1] - s[0][1]) * (s[2][0] - s[0][0]);
        if area.abs() < 1e-14 {
            continue;
        }
        let xmin = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let xmax = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let ymin = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let ymax = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let y0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let x1 = ((xmax - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let y1 = ((ymax - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for py in y0..=y1 as usize {
            for px in x0..=x1 as usize {
                let q = [px as f64 + 0.5, py as f64 + 0.5];
                let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
                let b0 = edge(s[1], s[2]) / area;
                let b1 = edge(s[2], s[0]) / area;
                let b2 = edge(s[0], s[1]) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                // perspective-correct: 1/z is affine in screen space
                let iz = b0 / c[0][2] + b1 / c[1][2] + b2 / c[2][2];
                let z = 1.0 / iz;
                let idx = py * w + px;
                if z < depth[idx] {
                    depth[idx] = z;
                    face[idx] = Some(fi as u32);
                    let wts = [b0 / c[0][2] * z, b1 / c[1][2] * z, b2 / c[2][2] * z];
                    let n = add(
                        add(scale(vn[f[0] as usize], wts[0]), scale(vn[f[1] as usize], wts[1])),
                        scale(vn[f[2] as usize], wts[2]),
                    );
                    normals[idx] = normalize(n);
                }
            }
        }
    }
    Rendered {
        buffer: DepthBuffer {
            width: w,
            height: h,
            depth,
            face,
        },
        normals,
    }
}

/// Render the z-buffer only, for an arbitrary camera.
pub fn depth_buffer(mesh: &Mesh, view: &CameraView) -> DepthBuffer {
    rasterize(mesh, &view.rotation, view.translation, &view.intrinsics, view.width(), view.height()).buffer
}

/// Render `mesh` from a camera on the orbit at `yaw` degrees.
pub fn render_view(mesh: &Mesh, yaw: f64, config: &RenderConfig) -> CameraView {
    let size = config.image_size;
    let k = default_intrinsics(size);
    let (r, t) = orbit_extrinsics(yaw, ORBIT_RADIUS);
    let out = rasterize(mesh, &r, t, &k, size, size);
    let hw = size * size;
    let mut image = vec![0.0; CHANNELS * hw];
    let mut mask = vec![0.0; hw];
    for i in 0..hw {
        let z = out.buffer.depth[i];
        if z.is_finite() {
            image[i] = (z - DEPTH_NEAR) / (DEPTH_FAR - DEPTH_NEAR);
            for c in 0..3 {
                image[(1 + c) * hw + i] = out.normals[i][c];
            }
            image[SILHOUETTE * hw + i] = 1.0;
            mask[i] = 1.0;
        }
    }
    CameraView {
        intrinsics: k,
        rotation: r,
        translation: t,
        image: Tensor::new(vec![CHANNELS, size, size], image).expect("sized"),
        mask: Tensor::new(vec![1, size, size], mask).expect("sized"),
        yaw_deg: yaw,
    }
}

/// Depth change across one pixel around vertex `v` as seen by `view`: the
/// largest screen-space depth gradient (L1) over the faces incident to `v`.
/// A pixel center lies within half a pixel of the vertex projection, so this
/// bounds the gap between the vertex depth and its pixel's z-buffer value.
pub fn depth_quantum(mesh: &Mesh, view: &CameraView, v: usize) -> f64 {
    let k = &view.intrinsics;
    let mut q: f64 = 0.0;
    for f in 0..mesh.faces.len() {
        if !mesh.faces[f].contains(&(v as u32)) {
            continue;
        }
        let c: Vec<Vec3> = mesh.triangle(f).iter().map(|p| view.to_camera(*p)).collect();
        let s: Vec<[f64; 2]> = c.iter().map(|p| [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy]).collect();
        let area = (s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[1][1] - s[0][1]) * (s[2][0] - s[0][0]);
        if area.abs() < 1e-14 {
            continue;
        }
        let (dz1, dz2) = (c[1][2] - c[0][2], c[2][2] - c[0][2]);
        let gx = (dz1 * (s[2][1] - s[0][1]) - dz2 * (s[1][1] - s[0][1])) / area;
        let gy = (dz2 * (s[1][0] - s[0][0]) - dz1 * (s[2][0] - s[0][0])) / area;
        q = q.max(gx.abs() + gy.abs());
    }
    q
}
