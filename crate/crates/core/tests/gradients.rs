use glvd::tensor::gradcheck::{check_displacement_loss, check_extra_op, EXTRA_OPS};
use glvd::tensor::{LayerKind, Tape, Tensor};

const SEEDS: u64 = 100;
const TOL: f64 = 1e-6;

#[test]
fn every_layer_kind_matches_finite_differences() {
    for kind in LayerKind::ALL {
        for seed in 0..SEEDS {
            let err = check_layer_kind(kind, seed);
            assert!(err <= TOL, "{} seed {seed}: rel err {err:e}", kind.name());
        }
    }
}

fn check_layer_kind(kind: LayerKind, seed: u64) -> f64 {
    glvd::tensor::gradcheck::check_layer_kind(kind, seed).unwrap()
}

#[test]
fn displacement_losses_match_finite_differences() {
    for seed in 0..SEEDS {
        for l2 in [false, true] {
            let err = check_displacement_loss(l2, seed).unwrap();
            assert!(err <= TOL, "clipped_l2={l2} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn composite_ops_match_finite_differences() {
    for name in EXTRA_OPS {
        for seed in 0..SEEDS {
            let err = check_extra_op(name, seed).unwrap();
            assert!(err <= TOL, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn sum_gives_ones() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_vec(vec![1.0, -2.0, 5.0]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_sum_gradient() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_vec(vec![1.0, 2.0]));
    let y = t.mul(x, x).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(t.backward(x).is_err());
}
