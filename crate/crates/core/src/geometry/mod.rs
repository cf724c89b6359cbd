//! Meshes, calibrated cameras, scene normalization, keypoint selection and
//! the surface Chamfer metric.

mod camera;
pub mod chamfer;
pub mod io;
mod keypoints;
pub mod linalg;
mod mesh;

pub use camera::{
    identity_camera, normalization_for, normalize_scene, orbit_extrinsics, project, project_camera,
    projection_jacobian, transform_view, unproject, CameraView, Intrinsics, Projection, Scene, Similarity,
    MIN_DEPTH, NORMALIZED_HALF_EXTENT,
};
pub use chamfer::{chamfer_mm, chamfer_unidirectional, chamfer_unidirectional_exhaustive, Bvh};
pub use keypoints::{select_keypoints, KeypointSelection};
pub use linalg::{Mat3, Vec3};
pub use mesh::{topology_id, Mesh};
