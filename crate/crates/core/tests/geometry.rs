use std::path::Path;

use glvd::geometry::chamfer::{chamfer_samples, nearest_dist2_exhaustive};
use glvd::geometry::io::{obj_from_str, obj_to_string, ply_from_bytes, ply_to_bytes, points_ply_bytes};
use glvd::geometry::linalg::{mat_mul, rot_y, Mat3};
use glvd::geometry::{
    chamfer_unidirectional, chamfer_unidirectional_exhaustive, identity_camera, normalize_scene,
    orbit_extrinsics, project, select_keypoints, unproject, Bvh, CameraView, Intrinsics, Mesh, Scene,
    Similarity,
};
use glvd::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blank(w: usize, h: usize) -> (Tensor, Tensor) {
    (Tensor::zeros(&[5, h, w]), Tensor::zeros(&[1, h, w]))
}

fn cam(fx: f64, cx: f64, rotation: Mat3, translation: [f64; 3]) -> CameraView {
    let (img, mask) = blank(8, 8);
    let mut v = identity_camera(Intrinsics { fx, fy: fx, cx, cy: cx }, img, mask);
    v.rotation = rotation;
    v.translation = translation;
    v
}

fn square(z: f64) -> Mesh {
    Mesh::new(
        vec![[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
}

fn random_mesh(rng: &mut ChaCha8Rng, max_tris: usize) -> Mesh {
    let f = rng.random_range(1..=max_tris);
    let mut v = Vec::new();
    let mut faces = Vec::new();
    for i in 0..f {
        for _ in 0..3 {
            v.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        }
        let b = 3 * i as u32;
        faces.push([b, b + 1, b + 2]);
    }
    Mesh::new(v, faces).unwrap()
}

#[test]
fn projection_examples() {
    let c = cam(1.0, 0.0, glvd::geometry::linalg::IDENTITY, [0.0; 3]);
    let p = project([0.0, 0.0, 1.0], &c);
    assert_eq!((p.pixel, p.depth), ([0.0, 0.0], 1.0));
    let p = project([1.0, 0.0, 2.0], &c);
    assert_eq!(p.pixel, [0.5, 0.0]);
    assert!(project([0.0, 0.0, -1.0], &c).behind);
}

#[test]
fn chamfer_examples() {
    let a = square(0.0);
    assert!(chamfer_unidirectional(&a, &a, 500, 1).unwrap() < 1e-12);
    let d = chamfer_unidirectional(&a, &square(0.3), 500, 1).unwrap();
    assert!((d - 0.3).abs() < 1e-12);
    let empty = Mesh::new(vec![], vec![]).unwrap();
    assert!(chamfer_unidirectional(&a, &empty, 10, 0).is_err());
}

#[test]
fn bvh_matches_exhaustive_on_random_meshes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..200 {
        let gt = random_mesh(&mut rng, 20);
        let pred = random_mesh(&mut rng, 20);
        let fast = chamfer_unidirectional(&gt, &pred, 64, trial).unwrap();
        let slow = chamfer_unidirectional_exhaustive(&gt, &pred, 64, trial).unwrap();
        assert!((fast - slow).abs() <= 1e-12, "trial {trial}: {fast} vs {slow}");
    }
    // larger meshes exercise deeper trees
    let pred = random_mesh(&mut rng, 300);
    let bvh = Bvh::build(&pred).unwrap();
    for _ in 0..500 {
        let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        assert_eq!(bvh.nearest_dist2(p), nearest_dist2_exhaustive(&pred, p));
    }
}

#[test]
fn normalize_examples() {
    let inside = Mesh::new(
        vec![[-0.9, 0.0, 0.0], [0.95, 0.1, 0.0], [0.0, 0.5, -0.95]],
        vec![[0, 1, 2]],
    )
    .unwrap();
    let c = cam(40.0, 4.0, glvd::geometry::linalg::IDENTITY, [0.0, 0.0, 3.0]);
    let scene = Scene {
        gt_mesh: inside.clone(),
        views: vec![c.clone()],
        identity_id: "a".into(),
        normalization: Similarity::default(),
    };
    let n = normalize_scene(&scene).unwrap();
    assert_eq!(n, scene);

    let big = Mesh::new(
        vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 10.0], [10.0, 10.0, 10.0]],
        vec![[0, 1, 2], [1, 3, 2]],
    )
    .unwrap();
    let (r, _) = orbit_extrinsics(25.0, 1.0);
    let view = cam(40.0, 4.0, r, [1.0, -2.0, 30.0]);
    let scene = Scene {
        gt_mesh: big.clone(),
        views: vec![view.clone()],
        identity_id: "b".into(),
        normalization: Similarity::default(),
    };
    let n = normalize_scene(&scene).unwrap();
    assert!((n.normalization.scale - 0.19).abs() < 1e-15);
    let (lo, hi) = n.gt_mesh.bounds();
    for k in 0..3 {
        assert!((lo[k] + hi[k]).abs() < 1e-12);
    }
    for (a, b) in big.vertices.iter().zip(&n.gt_mesh.vertices) {
        let (pa, pb) = (project(*a, &view), project(*b, &n.views[0]));
        assert!((pa.pixel[0] - pb.pixel[0]).abs() < 1e-9 && (pa.pixel[1] - pb.pixel[1]).abs() < 1e-9);
    }
    let nn = normalize_scene(&n).unwrap();
    assert_eq!(nn, n);

    let flat = Mesh::new(vec![[1.0, 1.0, 1.0]; 3], vec![]).unwrap();
    let s = Scene {
        gt_mesh: flat,
        views: vec![c],
        identity_id: "c".into(),
        normalization: Similarity::default(),
    };
    assert!(normalize_scene(&s).is_err());
}

#[test]
fn keypoint_examples() {
    let line = Mesh::new((0..11).map(|i| [i as f64, 0.0, 0.0]).collect(), vec![]).unwrap();
    for seed in 0..5 {
        let mut k = select_keypoints(&line, 2, seed).unwrap().vertex_indices;
        k.sort();
        assert_eq!(k, vec![0, 10]);
    }
    let mut all = select_keypoints(&line, 11, 3).unwrap().vertex_indices;
    all.sort();
    assert_eq!(all, (0..11).collect::<Vec<_>>());
    assert!(select_keypoints(&line, 12, 0).is_err());
    assert_eq!(select_keypoints(&line, 5, 9).unwrap(), select_keypoints(&line, 5, 9).unwrap());
}

#[test]
fn mesh_io_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = random_mesh(&mut rng, 10);
    let p = Path::new("mem");
    assert_eq!(ply_from_bytes(&ply_to_bytes(&m), p).unwrap(), m);
    assert_eq!(obj_from_str(&obj_to_string(&m), p).unwrap(), m);
    let pts = vec![[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]];
    let cloud = ply_from_bytes(&points_ply_bytes(&pts, [255, 0, 0]), p).unwrap();
    assert_eq!(cloud.vertices, pts);
    assert!(cloud.faces.is_empty());
    assert!(ply_from_bytes(&ply_to_bytes(&m)[..40], p).is_err());
    let quad = obj_from_str("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n", p).unwrap();
    assert_eq!(quad.faces, vec![[0, 1, 2], [0, 2, 3]]);
}

#[test]
fn degenerate_and_out_of_range_faces_rejected() {
    let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    assert!(Mesh::new(v.clone(), vec![[0, 0, 1]]).is_err());
    assert!(Mesh::new(v, vec![[0, 1, 3]]).is_err());
}

#[test]
fn topology_id_ignores_vertex_motion() {
    let a = square(0.0);
    let b = square(5.0);
    assert_eq!(a.topology_id(), b.topology_id());
    let mut c = a.clone();
    c.faces.swap(0, 1);
    assert_ne!(a.topology_id(), c.topology_id());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn project_unproject_round_trip(
        yaw in -180.0f64..180.0, px in -2.0f64..2.0, py in -2.0f64..2.0, pz in -0.9f64..0.9,
        tx in -0.3f64..0.3, f in 10.0f64..200.0,
    ) {
        let (r, mut t) = orbit_extrinsics(yaw, 2.5);
        t[0] += tx;
        let c = cam(f, 32.0, r, t);
        let p = [px * 0.4, py * 0.4, pz];
        let pr = project(p, &c);
        prop_assert!(!pr.behind);
        let q = unproject(pr.pixel, pr.depth, &c);
        for k in 0..3 {
            prop_assert!((p[k] - q[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn chamfer_rigid_invariance(seed in 0u64..1000, yaw in -3.0f64..3.0, tx in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_mesh(&mut rng, 8);
        let pred = random_mesh(&mut rng, 8);
        let r = mat_mul(&rot_y(yaw), &rot_y(0.3 * yaw));
        let tf = |m: &Mesh| m.with_vertices(m.vertices.iter().map(|v| {
            let w = glvd::geometry::linalg::mat_vec(&r, *v);
            [w[0] + tx, w[1] - tx, w[2]]
        }).collect());
        // surface samples are drawn with barycentric weights, so they move with the mesh
        let a = chamfer_samples(&gt, &pred, 32, seed).unwrap();
        let b = chamfer_samples(&tf(&gt), &tf(&pred), 32, seed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn keypoints_depend_only_on_inputs(seed in 0u64..500, k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mesh(&mut rng, 10);
        let a = select_keypoints(&m, k.min(m.vertices.len()), seed).unwrap();
        a.validate(m.vertices.len()).unwrap();
        let m2 = m.clone();
        prop_assert_eq!(a, select_keypoints(&m2, k.min(m.vertices.len()), seed).unwrap());
    }
}
