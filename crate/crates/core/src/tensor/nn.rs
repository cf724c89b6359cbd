//! Parameterized building blocks registered in a [`ParamStore`].

use rand::Rng;

use super::layers::GROUP_NORM_EPS;
use super::optim::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let a = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![fan_out, fan_in], uniform_init(rng, fan_in * fan_out, fan_in)).expect("sized"),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.linear(x, w, Some(b))
    }
}

/// Linear layer with weight normalization: `W = g · v / ‖v‖` per output row.
#[derive(Clone, Debug)]
pub struct WnLinear {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl WnLinear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let vdata = uniform_init(rng, fan_in * fan_out, fan_in);
        let gdata: Vec<f64> = vdata
            .chunks(fan_in)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let v = store.add(format!("{name}.weight_v"), Tensor::new(vec![fan_out, fan_in], vdata).expect("sized"));
        let g = store.add(format!("{name}.weight_g"), Tensor::from_vec(gdata));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        WnLinear { v, g, b, fan_in, fan_out }
    }
}

/// A dense layer that is either plain or weight-normalized.
#[derive(Clone, Debug)]
pub enum Dense {
    Plain(Linear),
    Norm(WnLinear),
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        match self {
            Dense::Plain(l) => l.fan_in,
            Dense::Norm(l) => l.fan_in,
        }
    }

    pub fn fan_out(&self) -> usize {
        match self {
            Dense::Plain(l) => l.fan_out,
            Dense::Norm(l) => l.fan_out,
        }
    }

    /// Effective `(weight, bias)` handles on this tape.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Var, Var)> {
        match self {
            Dense::Plain(l) => Ok((tape.param(store, l.w), tape.param(store, l.b))),
            Dense::Norm(l) => {
                let v = tape.param(store, l.v);
                let g = tape.param(store, l.g);
                let w = tape.weight_norm(v, g)?;
                Ok((w, tape.param(store, l.b)))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = self.weights(tape, store)?;
        tape.linear(x, w, Some(b))
    }
}

/// Multilayer perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], weight_norm: bool, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let lname = format!("{name}.layer{i}");
                if weight_norm {
                    Dense::Norm(WnLinear::new(store, &lname, d[0], d[1], rng))
                } else {
                    Dense::Plain(Linear::new(store, &lname, d[0], d[1], rng))
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    /// Layer `i` followed by ReLU unless it is the last layer.
    pub fn layer(&self, i: usize, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.layers[i].forward(tape, store, x)?;
        Ok(if i + 1 < self.layers.len() { tape.relu(y) } else { y })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.layers.len() {
            h = self.layer(i, tape, store, h)?;
        }
        Ok(h)
    }

    /// Forward pass that also pushes input tangents through the network.
    ///
    /// Each tangent has the input's shape and holds `∂x/∂s` for some scalar
    /// direction `s`; the returned tangents are `∂y/∂s`. Everything is recorded
    /// on the tape, so losses on the tangents backpropagate to the parameters.
    pub fn forward_with_tangents(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        tangents: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut ts = tangents.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = layer.weights(tape, store)?;
            let pre = tape.linear(h, w, Some(b))?;
            for t in &mut ts {
                *t = tape.linear(*t, w, None)?;
            }
            if i < last {
                h = tape.relu(pre);
                for t in &mut ts {
                    *t = tape.relu_mask_mul(pre, *t)?;
                }
            } else {
                h = pre;
            }
        }
        Ok((h, ts))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub ks: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, ks: usize, rng: &mut R) -> Self {
        let fan_in = cin * ks * ks;
        let w = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![cout, fan_in], uniform_init(rng, cout * fan_in, fan_in)).expect("sized"),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d { w, b, ks }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.conv2d(x, w, b, self.ks)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::from_vec(vec![1.0; channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(store, self.gamma), tape.param(store, self.beta));
        tape.group_norm(x, g, b, self.groups, GROUP_NORM_EPS)
    }
}

/// conv3x3 → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, groups: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, rng),
            norm: GroupNorm::new(store, &format!("{name}.gn"), cout, groups),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.norm.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_norm_rows_match_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let l = WnLinear::new(&mut store, "l", 7, 4, &mut rng);
        store.get_mut(l.g).value = Tensor::from_vec(vec![0.5, 2.0, 1.0, 3.25]);
        let mut tape = Tape::new();
        let (w, _) = Dense::Norm(l.clone()).weights(&mut tape, &store).unwrap();
        let wd = tape.value(w).data();
        for (r, g) in [0.5, 2.0, 1.0, 3.25].iter().enumerate() {
            let n: f64 = wd[r * 7..(r + 1) * 7].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - g).abs() < 1e-12);
        }
    }

    #[test]
    fn init_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 16, 8, &mut rng);
        assert!(store.get(l.w).value.data().iter().all(|x| x.abs() <= 0.25));
        assert!(store.get(l.b).value.data().iter().all(|x| *x == 0.0));
    }
}
