use glvd::config::ModelConfig;
use glvd::encoder::{
    heatmap_argmax, heatmap_targets, input_planes, project_points, sample_descriptor, sdf_losses, FeatureNet, FusionNet,
    HeatmapNet, HeatmapSet, NetworkSdf, SdfHead, SignedDistance,
};
use glvd::geometry::{CameraView, Vec3};
use glvd::synthdata::{render_view, RenderConfig, Template};
use glvd::tensor::gradcheck::rel_err;
use glvd::tensor::{read_tensor_file, write_tensor_file, ParamStore, Tape, Tensor, TensorFile, Var};
use glvd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        feature_res: 8,
        feature_channels: 4,
        stacks: 2,
        norm_groups: 2,
        keypoint_channels: 4,
        heatmap_channels: 4,
        num_keypoints: 3,
        gk_hidden: 8,
        gv_hidden: 8,
        sdf_hidden: 8,
        ..ModelConfig::default()
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        feature_res: 16,
        feature_channels: 8,
        stacks: 2,
        norm_groups: 4,
        keypoint_channels: 8,
        heatmap_channels: 8,
        num_keypoints: 4,
        sdf_hidden: 16,
        ..ModelConfig::default()
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn front_view(size: usize) -> CameraView {
    let t = Template::standard();
    let mesh = t.mesh.with_vertices(t.mesh.vertices.iter().map(|v| [v[0] / 120.0, v[1] / 120.0, v[2] / 120.0]).collect());
    let cfg = RenderConfig {
        image_size: size,
        ..RenderConfig::default()
    };
    render_view(&mesh, 20.0, &cfg)
}

#[test]
fn default_feature_maps_have_expected_shapes() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let net = FeatureNet::new(&mut store, &cfg, &mut rng);
    let image = Tensor::zeros(&[5, 64, 64]);
    let mask = Tensor::zeros(&[1, 64, 64]);
    let mut tape = Tape::new();
    let maps = net.forward(&mut tape, &store, &image, &mask).unwrap();
    assert_eq!(maps.per_stack.len(), 4);
    for m in &maps.per_stack {
        assert_eq!(tape.value(*m).shape(), &[64, 64, 64]);
        // all-zero input stays finite thanks to the group-norm epsilon
        assert!(tape.value(*m).data().iter().all(|x| x.is_finite()));
    }
    assert_eq!(cfg.descriptor_dim(), 256);
}

#[test]
fn resolution_not_divisible_by_four_is_rejected() {
    let cfg = ModelConfig {
        feature_res: 6,
        ..toy_config()
    };
    assert!(cfg.validate().is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let net = FeatureNet::new(&mut store, &cfg, &mut rng);
    let mut tape = Tape::new();
    let err = net.forward(&mut tape, &store, &Tensor::zeros(&[2, 12, 12]), &Tensor::zeros(&[1, 12, 12]));
    assert!(err.is_err());
    let planes = tape.constant(Tensor::zeros(&[3, 6, 6]));
    assert!(net.forward_planes(&mut tape, &store, planes).is_err());
    // misaligned mask
    assert!(input_planes(&Tensor::zeros(&[2, 8, 8]), &Tensor::zeros(&[1, 4, 4]), 8).is_err());
}

/// Relative error between the tape gradient of every parameter and central
/// differences of the same scalar objective.
fn param_gradcheck(store: &mut ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.zero_grads();
    store.accumulate(&tape, &grads);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-6;
    for pi in 0..store.len() {
        let id = glvd::tensor::ParamId(pi);
        let n = store.get(id).value.numel();
        analytic.extend(store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]));
        for k in 0..n {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let mut tp = Tape::new();
            let lp = f(&mut tp, store).unwrap();
            let vp = tp.value(lp).item();
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let mut tm = Tape::new();
            let lm = f(&mut tm, store).unwrap();
            let vm = tm.value(lm).item();
            store.get_mut(id).value.data_mut()[k] = orig;
            numeric.push((vp - vm) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

#[test]
fn two_stack_gradient_check_on_toy_config() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let net = FeatureNet::new(&mut store, &cfg, &mut rng);
    let planes = random_tensor(&[3, 8, 8], &mut rng);
    let proj: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..4 * 64).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let objective = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let p = tape.constant(planes.clone());
        let maps = net.forward_planes(tape, store, p)?;
        let mut parts = Vec::new();
        for (m, w) in maps.per_stack.iter().zip(&proj) {
            let s = tape.mul_const(*m, w.clone())?;
            parts.push(tape.sum(s));
        }
        tape.add(parts[0], parts[1])
    };
    let err = param_gradcheck(&mut store, &objective);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn descriptor_contracts() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let net = FeatureNet::new(&mut store, &cfg, &mut rng);
    let view = front_view(64);
    let mut tape = Tape::new();
    let maps = net.forward(&mut tape, &store, &view.image, &view.mask).unwrap();
    let d = cfg.descriptor_dim();

    // behind the camera: exactly zero
    let behind_pt: Vec3 = view.from_camera([0.1, 0.0, -1.0]);
    let (coords, behind) = project_points(&[behind_pt, [0.0, 0.0, 0.0]], &view);
    assert_eq!(behind, vec![true, false]);
    let desc = sample_descriptor(&mut tape, &maps, &coords, &behind).unwrap();
    assert_eq!(tape.value(desc).shape(), &[2, d]);
    assert!(tape.value(desc).data()[..d].iter().all(|x| *x == 0.0));
    assert!(tape.value(desc).data()[d..].iter().any(|x| *x != 0.0));

    // texel centers read the stored channel values
    let r = cfg.feature_res;
    let c = cfg.feature_channels;
    for (tx, ty) in [(0, 0), (5, 9), (15, 15), (7, 2)] {
        let coords = vec![(2 * tx + 1) as f64 / r as f64 - 1.0, (2 * ty + 1) as f64 / r as f64 - 1.0];
        let desc = sample_descriptor(&mut tape, &maps, &coords, &[false]).unwrap();
        let got = tape.value(desc).data().to_vec();
        for (s, m) in maps.per_stack.iter().enumerate() {
            let map = tape.value(*m).data();
            for ch in 0..c {
                let direct = map[(ch * r + ty) * r + tx];
                assert!((got[s * c + ch] - direct).abs() <= 1e-12, "stack {s} channel {ch}");
            }
        }
    }

    // continuity under a 1e-6 pixel move
    let range = maps
        .per_stack
        .iter()
        .flat_map(|m| tape.value(*m).data().to_vec())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let range = range.1 - range.0;
    let step = 2.0 * 1e-6 / view.width() as f64;
    for _ in 0..50 {
        let u: f64 = rng.random_range(-0.95..0.95);
        let v: f64 = rng.random_range(-0.95..0.95);
        let a = sample_descriptor(&mut tape, &maps, &[u, v], &[false]).unwrap();
        let b = sample_descriptor(&mut tape, &maps, &[u + step, v - step], &[false]).unwrap();
        let diff = tape
            .value(a)
            .data()
            .iter()
            .zip(tape.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-4 * range, "jump {diff} vs range {range}");
    }
}

#[test]
fn heatmaps_are_probabilities_of_the_right_shape() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let net = HeatmapNet::new(&mut store, &cfg, &mut rng);
    let view = front_view(64);
    let planes = input_planes(&view.image, &view.mask, cfg.feature_res).unwrap();
    let set = net.predict(&store, &planes).unwrap();
    assert_eq!(set.maps.shape(), &[4, 16, 16]);
    assert!(set.maps.data().iter().all(|x| (0.0..=1.0).contains(x)));
    assert_eq!(set.k(), 4);
}

#[test]
fn heatmap_targets_peak_at_the_keypoint() {
    let pixels = [Some([20.0, 40.0]), None, Some([63.9, 0.1])];
    let t = heatmap_targets(&pixels, 64, 64);
    let set = HeatmapSet {
        maps: Tensor::new(vec![3, 64, 64], t.clone()).unwrap(),
    };
    let peaks = heatmap_argmax(&set, 64);
    assert_eq!(peaks[0], [19.5, 39.5]);
    assert!(t[64 * 64..2 * 64 * 64].iter().all(|x| *x == 0.0));
    assert_eq!(peaks[2], [63.5, 0.5]);
    assert!(t.iter().all(|x| (0.0..=1.0).contains(x)));
    // half resolution keeps the same image-space peak to within a texel
    let half = heatmap_targets(&pixels[..1], 64, 32);
    let set = HeatmapSet {
        maps: Tensor::new(vec![1, 32, 32], half).unwrap(),
    };
    let p = heatmap_argmax(&set, 64)[0];
    assert!((p[0] - 20.0).abs() <= 1.0 && (p[1] - 40.0).abs() <= 1.0);
}

#[test]
fn fusion_wiring_and_freeze_contract() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut fv_store = ParamStore::new();
    let fv = FeatureNet::new(&mut fv_store, &cfg, &mut rng);
    let mut hm_store = ParamStore::new();
    let hm = HeatmapNet::new(&mut hm_store, &cfg, &mut rng);
    hm_store.freeze();
    let hm_before = hm_store.named_tensors();
    let mut fs_store = ParamStore::new();
    let fs = FusionNet::new(&mut fs_store, &cfg, &mut rng);

    let view = front_view(64);
    let planes_t = input_planes(&view.image, &view.mask, cfg.feature_res).unwrap();
    let mut tape = Tape::new();
    let planes = tape.constant(planes_t);
    let maps = fv.forward_planes(&mut tape, &fv_store, planes).unwrap();
    let heat = hm.forward(&mut tape, &hm_store, planes).unwrap();
    let fk = fs.forward(&mut tape, &fs_store, planes, Some(heat), maps.per_stack[0]).unwrap();
    assert_eq!(tape.value(fk).shape(), &[cfg.keypoint_channels, 16, 16]);

    let w: Vec<f64> = (0..tape.value(fk).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = tape.mul_const(fk, w).unwrap();
    let loss = tape.sum(s);
    let grads = tape.backward(loss).unwrap();
    hm_store.accumulate(&tape, &grads);
    fv_store.accumulate(&tape, &grads);
    fs_store.accumulate(&tape, &grads);

    assert!(hm_store.params().iter().all(|p| p.grad.is_none()));
    hm_store.step(&glvd::tensor::AdamConfig::with_lr(1e-2)).unwrap();
    assert_eq!(hm_store.named_tensors(), hm_before);

    let first_stack_grad: f64 = fv_store
        .params()
        .iter()
        .filter(|p| p.name.starts_with("f_v.stack0") || p.name.starts_with("f_v.stem"))
        .flat_map(|p| p.grad.clone().unwrap_or_default())
        .map(f64::abs)
        .sum();
    assert!(first_stack_grad > 0.0);
    let later_grad: f64 = fv_store
        .params()
        .iter()
        .filter(|p| p.name.starts_with("f_v.stack1"))
        .flat_map(|p| p.grad.clone().unwrap_or_default())
        .map(f64::abs)
        .sum();
    assert_eq!(later_grad, 0.0);

    // heatmap count must match the configured keypoints
    let wrong = tape.constant(Tensor::zeros(&[3, 16, 16]));
    assert!(fs.forward(&mut tape, &fs_store, planes, Some(wrong), maps.per_stack[0]).is_err());
}

/// `f(x) = x_z`, evaluated without any network.
struct PlaneZ;

impl SignedDistance for PlaneZ {
    fn eval(&self, tape: &mut Tape, pts: &[Vec3], with_grad: bool) -> Result<(Var, Option<[Var; 3]>)> {
        let n = pts.len();
        let v = tape.constant(Tensor::new(vec![n, 1], pts.iter().map(|p| p[2]).collect())?);
        if !with_grad {
            return Ok((v, None));
        }
        let zero = tape.constant(Tensor::zeros(&[n, 1]));
        let one = tape.constant(Tensor::new(vec![n, 1], vec![1.0; n])?);
        Ok((v, Some([zero, zero, one])))
    }
}

#[test]
fn planted_plane_has_zero_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let surface: Vec<Vec3> = (0..100)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
        .collect();
    let volume: Vec<Vec3> = (0..100)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let mut tape = Tape::new();
    let (ls, le) = sdf_losses(&mut tape, &PlaneZ, &surface, &volume).unwrap();
    assert_eq!(tape.value(ls).item(), 0.0);
    assert_eq!(tape.value(le).item(), 0.0);
    assert!(sdf_losses(&mut tape, &PlaneZ, &[], &volume).is_err());
}

#[test]
fn eikonal_input_gradient_matches_finite_differences() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let net = FeatureNet::new(&mut store, &cfg, &mut rng);
    let head = SdfHead::new(&mut store, &cfg, &mut rng);
    let view = front_view(64);
    let mut tape = Tape::new();
    let maps = net.forward(&mut tape, &store, &view.image, &view.mask).unwrap();
    let sdf = NetworkSdf {
        head: &head,
        store: &store,
        maps: &maps,
        view: &view,
    };
    let pts: Vec<Vec3> = (0..40)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let (_, g) = sdf.eval(&mut tape, &pts, true).unwrap();
    let g = g.unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-6;
    for (i, p) in pts.iter().enumerate() {
        for a in 0..3 {
            analytic.push(tape.value(g[a]).data()[i]);
            let (mut pp, mut pm) = (*p, *p);
            pp[a] += h;
            pm[a] -= h;
            let (vp, _) = sdf.eval(&mut tape, &[pp], false).unwrap();
            let (vm, _) = sdf.eval(&mut tape, &[pm], false).unwrap();
            numeric.push((tape.value(vp).item() - tape.value(vm).item()) / (2.0 * h));
        }
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err <= 1e-5, "relative error {err}");

    // the eikonal loss backpropagates into f_v and the head
    let mut tape = Tape::new();
    let maps = net.forward(&mut tape, &store, &view.image, &view.mask).unwrap();
    let sdf = NetworkSdf {
        head: &head,
        store: &store,
        maps: &maps,
        view: &view,
    };
    let (ls, le) = sdf_losses(&mut tape, &sdf, &pts[..10], &pts[10..]).unwrap();
    let le = tape.scale(le, 0.1);
    let total = tape.add(ls, le).unwrap();
    let grads = tape.backward(total).unwrap();
    store.zero_grads();
    store.accumulate(&tape, &grads);
    assert!(store.grads_finite());
    assert!(store
        .params()
        .iter()
        .filter(|p| p.name.starts_with("f_v.stem"))
        .any(|p| p.grad.as_ref().is_some_and(|g| g.iter().any(|x| *x != 0.0))));
}

#[test]
fn encoder_weights_round_trip_through_checkpoint() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let _net = FeatureNet::new(&mut store, &cfg, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let mut file = TensorFile::new("abc");
    file.tensors = store.named_tensors();
    write_tensor_file(&path, &file).unwrap();
    let back = read_tensor_file(&path, Some("abc")).unwrap();
    let mut other = ParamStore::new();
    let _ = FeatureNet::new(&mut other, &cfg, &mut ChaCha8Rng::seed_from_u64(10));
    assert_ne!(other.named_tensors(), store.named_tensors());
    other.load_named(&back.tensors).unwrap();
    assert_eq!(other.named_tensors(), store.named_tensors());
    assert!(read_tensor_file(&path, Some("other")).is_err());
}
