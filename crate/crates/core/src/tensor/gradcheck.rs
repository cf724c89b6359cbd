//! Central finite-difference checks of tape gradients.
//!
//! Each check builds a random small instance from a seed, projects the output
//! onto a fixed random direction to get a scalar, and compares the analytic
//! gradient of every differentiable input against central differences.
//! Inputs are drawn away from kinks (ReLU zero, pooling ties, texel edges,
//! clipping radii) so that the finite-difference stencil never straddles one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{forward, LayerKind, LayerSpec};
use super::tape::{LossKind, Tape, Var};
use super::Tensor;
use crate::error::Result;

pub const STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-8)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Worst relative error over the differentiable inputs (`wrt[i] == true`).
pub fn check(build: &Build<'_>, inputs: &[Tensor], wrt: &[bool], seed: u64) -> Result<f64> {
    let eval = |vals: &[Tensor], proj: Option<&[f64]>| -> Result<(Tape, Vec<Var>, Var, usize)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(wrt)
            .map(|(t, w)| if *w { tape.input(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = build(&mut tape, &vars)?;
        let out_len = tape.value(out).numel();
        let loss = match proj {
            Some(p) if tape.value(out).numel() > 1 => {
                let m = tape.mul_const(out, p.to_vec())?;
                tape.sum(m)
            }
            _ => tape.sum(out),
        };
        Ok((tape, vars, loss, out_len))
    };
    // draw the projection from the output size of a first evaluation
    let (_, _, _, out_len) = eval(inputs, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let proj: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (tape, vars, loss, _) = eval(inputs, Some(&proj))?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, (inp, w)) in inputs.iter().zip(wrt).enumerate() {
        if !*w {
            continue;
        }
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inp.numel()]);
        let mut numeric = vec![0.0; inp.numel()];
        for k in 0..inp.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= STEP;
            let (tp, _, lp, _) = eval(&plus, Some(&proj))?;
            let (tm, _, lm, _) = eval(&minus, Some(&proj))?;
            numeric[k] = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x: f64 = rng.random_range(-1.0..1.0);
            if x.abs() > margin {
                break x;
            }
        })
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Normalized coordinate whose pixel position keeps 1e-3 away from integer
/// texel positions; about a tenth of the draws fall outside [−1, 1].
fn safe_coord(rng: &mut ChaCha8Rng, n: usize) -> f64 {
    loop {
        let u: f64 = rng.random_range(-1.15..1.15);
        if u.abs() > 1.0 {
            if u.abs() > 1.0 + 1e-3 {
                return u;
            }
            continue;
        }
        let p = (u + 1.0) / 2.0 * n as f64 - 0.5;
        if (p - p.round()).abs() > 1e-3 && p > 1e-3 && p < (n - 1) as f64 - 1e-3 {
            return u;
        }
    }
}

/// Gradient check for one layer kind on a random small instance.
pub fn check_layer_kind(kind: LayerKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    match kind {
        LayerKind::Linear | LayerKind::WeightNormLinear => {
            // a single input column makes ∂W/∂v vanish identically, leaving only noise
            let min_in = if kind == LayerKind::WeightNormLinear { 2 } else { 1 };
            let (m, i, o) = (rng.random_range(1..4), rng.random_range(min_in..6), rng.random_range(1..5));
            let spec = LayerSpec::new(kind, &[("in", i as f64), ("out", o as f64)])?;
            let mut inputs = vec![t(&[m, i], rand_vec(&mut rng, m * i)), t(&[o, i], rand_vec(&mut rng, o * i))];
            if kind == LayerKind::WeightNormLinear {
                inputs.push(t(&[o], (0..o).map(|_| rng.random_range(0.5..2.0)).collect()));
            }
            inputs.push(t(&[o], rand_vec(&mut rng, o)));
            let wrt = vec![true; inputs.len()];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &wrt, seed)
        }
        LayerKind::Conv2d => {
            let (c, o, h, w) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..5));
            let ks = if rng.random_bool(0.5) { 3 } else { 1 };
            let spec = LayerSpec::new(kind, &[("in", c as f64), ("out", o as f64), ("kernel", ks as f64)])?;
            let inputs = vec![
                t(&[c, h, w], rand_vec(&mut rng, c * h * w)),
                t(&[o, c * ks * ks], rand_vec(&mut rng, o * c * ks * ks)),
                t(&[o], rand_vec(&mut rng, o)),
            ];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &[true; 3], seed)
        }
        LayerKind::Relu => {
            let n = rng.random_range(1..12);
            let spec = LayerSpec::new(kind, &[])?;
            let inputs = vec![t(&[n], away_from_zero(&mut rng, n, 1e-3))];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &[true], seed)
        }
        LayerKind::GroupNorm => {
            let g = rng.random_range(1..3);
            let c = g * rng.random_range(1..3);
            let (h, w) = (rng.random_range(2..4), rng.random_range(2..4));
            let spec = LayerSpec::new(kind, &[("channels", c as f64), ("groups", g as f64)])?;
            let inputs = vec![
                t(&[c, h, w], rand_vec(&mut rng, c * h * w)),
                t(&[c], rand_vec(&mut rng, c)),
                t(&[c], rand_vec(&mut rng, c)),
            ];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &[true; 3], seed)
        }
        LayerKind::BinaryDropout => {
            let (m, c) = (rng.random_range(1..4), rng.random_range(2..8));
            let p = rng.random_range(0.0..0.9);
            let spec = LayerSpec::new(kind, &[("p", p)])?;
            let inputs = vec![t(&[m, c], rand_vec(&mut rng, m * c))];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &[true], seed)
        }
        LayerKind::BilinearSample => {
            let (c, h, w) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..6));
            let p = rng.random_range(1..5);
            let spec = LayerSpec::new(kind, &[])?;
            let pts: Vec<f64> = (0..p).flat_map(|_| [safe_coord(&mut rng, w), safe_coord(&mut rng, h)]).collect();
            let inputs = vec![t(&[c, h, w], rand_vec(&mut rng, c * h * w)), t(&[p, 2], pts)];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &[true, true], seed)
        }
        LayerKind::MaxPool => {
            let (c, h, w) = (rng.random_range(1..3), 2 * rng.random_range(1..3), 2 * rng.random_range(1..3));
            let spec = LayerSpec::new(kind, &[("kernel", 2.0)])?;
            // distinct values on a shuffled lattice keep every window far from a tie
            let n = c * h * w;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
            for i in (1..n).rev() {
                vals.swap(i, rng.random_range(0..=i));
            }
            let inputs = vec![t(&[c, h, w], vals)];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &[true], seed)
        }
        LayerKind::NearestUpsample => {
            let (c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let spec = LayerSpec::new(kind, &[("factor", 2.0)])?;
            let inputs = vec![t(&[c, h, w], rand_vec(&mut rng, c * h * w))];
            check(&|tp, v| forward(tp, &spec, v, true, &mut layer_rng.clone()), &inputs, &[true], seed)
        }
    }
}

fn pair_away_from_kinks(rng: &mut ChaCha8Rng, tau: f64) -> ([f64; 3], [f64; 3]) {
    let dir = |rng: &mut ChaCha8Rng, len: f64| {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
        [v[0] / n * len, v[1] / n * len, v[2] / n * len]
    };
    loop {
        let lp = rng.random_range(0.01..3.0 * tau);
        let lq = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.01..3.0 * tau) };
        let clear_tau = (lp - tau).abs() > 1e-4 && (lq - tau).abs() > 1e-4;
        let clear_diff = (lp.min(tau) - lq.min(tau)).abs() > 1e-4 || (lp > tau && lq > tau);
        if clear_tau && clear_diff {
            return (dir(rng, lp), dir(rng, lq));
        }
    }
}

/// Gradient check of the displacement objective on an `M = 3, N = 4` batch.
pub fn check_displacement_loss(kind_l2: bool, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = rng.random_range(0.05..0.5);
    let kind = if kind_l2 {
        LossKind::ClippedL2 { tau }
    } else {
        LossKind::Directional {
            lambda1: rng.random_range(0.1..1.0),
            lambda2: rng.random_range(0.1..1.0),
            tau,
        }
    };
    let (m, n) = (3, 4);
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for _ in 0..m * n {
        let (p, q) = pair_away_from_kinks(&mut rng, tau);
        pred.extend(p);
        target.extend(q);
    }
    let inputs = vec![t(&[m, n * 3], pred)];
    check(
        &|tp, v| tp.displacement_loss(v[0], target.clone(), kind),
        &inputs,
        &[true],
        seed,
    )
}

/// Gradient checks of the remaining composite ops, keyed by name.
pub const EXTRA_OPS: [&str; 9] = [
    "linear_gather",
    "softmax_rows",
    "weighted_rel_sum",
    "self_attention",
    "bce_logits",
    "unit_norm_penalty",
    "bilinear_tangent",
    "tangent_mlp",
    "concat_slice_mean",
];

pub fn check_extra_op(name: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "linear_gather" => {
            let (p, k, n) = (3, 4, 6);
            let cols = vec![0, 1, 2, 3, 4, 5, 5, 0, 0];
            let inputs = vec![
                t(&[p, k], rand_vec(&mut rng, p * k)),
                t(&[n, k], rand_vec(&mut rng, n * k)),
                t(&[n], rand_vec(&mut rng, n)),
            ];
            check(&|tp, v| tp.linear_gather(v[0], v[1], v[2], cols.clone(), 3), &inputs, &[true; 3], seed)
        }
        "softmax_rows" => {
            let inputs = vec![t(&[2, 4], rand_vec(&mut rng, 8))];
            check(&|tp, v| tp.softmax_rows(v[0]), &inputs, &[true], seed)
        }
        "weighted_rel_sum" => {
            let (p, k) = (2, 3);
            let inputs = vec![t(&[p, k], rand_vec(&mut rng, p * k)), t(&[p, 3 * k], rand_vec(&mut rng, p * 3 * k))];
            check(&|tp, v| tp.weighted_rel_sum(v[0], v[1]), &inputs, &[true, true], seed)
        }
        "self_attention" => {
            let (n, d, dv) = (3, 2, 2);
            let inputs = vec![
                t(&[n, d], rand_vec(&mut rng, n * d)),
                t(&[n, d], rand_vec(&mut rng, n * d)),
                t(&[n, dv], rand_vec(&mut rng, n * dv)),
            ];
            check(&|tp, v| tp.self_attention(v[0], v[1], v[2]), &inputs, &[true; 3], seed)
        }
        "bce_logits" => {
            let target: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let inputs = vec![t(&[6], rand_vec(&mut rng, 6).iter().map(|x| 3.0 * x).collect())];
            check(&|tp, v| tp.bce_logits(v[0], target.clone()), &inputs, &[true], seed)
        }
        "unit_norm_penalty" => {
            let inputs = vec![t(&[3, 3], away_from_zero(&mut rng, 9, 0.05))];
            check(&|tp, v| tp.unit_norm_penalty(v[0]), &inputs, &[true], seed)
        }
        "bilinear_tangent" => {
            let (c, h, w) = (2, 4, 3);
            let pts: Vec<f64> = (0..3).flat_map(|_| [safe_coord(&mut rng, w), safe_coord(&mut rng, h)]).collect();
            let dpts = rand_vec(&mut rng, 6);
            let inputs = vec![t(&[c, h, w], rand_vec(&mut rng, c * h * w))];
            check(&|tp, v| tp.bilinear_tangent(v[0], &pts, &dpts), &inputs, &[true], seed)
        }
        "tangent_mlp" => {
            // eikonal-style objective on tangents, differentiated w.r.t. weights
            let (i, hdim) = (3, 4);
            let x = rand_vec(&mut rng, 2 * i);
            let inputs = vec![
                t(&[hdim, i], rand_vec(&mut rng, hdim * i)),
                t(&[hdim], rand_vec(&mut rng, hdim)),
                t(&[3, hdim], rand_vec(&mut rng, 3 * hdim)),
                t(&[3], rand_vec(&mut rng, 3)),
            ];
            check(
                &|tp, v| {
                    let xv = tp.constant(t(&[2, i], x.clone()));
                    let pre = tp.linear(xv, v[0], Some(v[1]))?;
                    let h = tp.relu(pre);
                    let mut cols = Vec::new();
                    for d in 0..i {
                        let mut e = vec![0.0; 2 * i];
                        e[d] = 1.0;
                        e[i + d] = 1.0;
                        let tv = tp.constant(t(&[2, i], e));
                        let t1 = tp.linear(tv, v[0], None)?;
                        let t1 = tp.relu_mask_mul(pre, t1)?;
                        let t2 = tp.linear(t1, v[2], None)?;
                        cols.push(tp.slice_cols(t2, 0, 1)?);
                    }
                    let out = tp.linear(h, v[2], Some(v[3]))?;
                    let grad = tp.concat_cols(&cols)?;
                    let pen = tp.unit_norm_penalty(grad)?;
                    let s = tp.mean(out);
                    tp.add(pen, s)
                },
                &inputs,
                &[true; 4],
                seed,
            )
        }
        "concat_slice_mean" => {
            let inputs = vec![t(&[2, 2], rand_vec(&mut rng, 4)), t(&[2, 3], rand_vec(&mut rng, 6)), t(&[2, 2], rand_vec(&mut rng, 4))];
            check(
                &|tp, v| {
                    let c = tp.concat_cols(&[v[0], v[1]])?;
                    let s = tp.slice_cols(c, 1, 2)?;
                    let m = tp.mean_of(&[s, v[2]])?;
                    let r = tp.reshape(m, &[4])?;
                    let k = tp.concat0(&[r, r])?;
                    let a = tp.abs_mean(k);
                    let q = tp.mul(k, k)?;
                    let q = tp.scale(q, 0.3);
                    let sq = tp.sum(q);
                    let d = tp.sub(sq, a)?;
                    let w = tp.sigmoid(m);
                    let w = tp.mean(w);
                    tp.add(d, w)
                },
                &inputs,
                &[true; 3],
                seed,
            )
        }
        other => Err(crate::error::Error::Invalid(format!("no gradient check named `{other}`"))),
    }
}
