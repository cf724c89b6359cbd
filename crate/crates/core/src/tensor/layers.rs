//! Declarative layer descriptions and a generic forward over tape handles.

use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d,
    Relu,
    GroupNorm,
    WeightNormLinear,
    BinaryDropout,
    BilinearSample,
    MaxPool,
    NearestUpsample,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Linear,
        LayerKind::Conv2d,
        LayerKind::Relu,
        LayerKind::GroupNorm,
        LayerKind::WeightNormLinear,
        LayerKind::BinaryDropout,
        LayerKind::BilinearSample,
        LayerKind::MaxPool,
        LayerKind::NearestUpsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::GroupNorm => "group_norm",
            LayerKind::WeightNormLinear => "weight_norm_linear",
            LayerKind::BinaryDropout => "binary_dropout",
            LayerKind::BilinearSample => "bilinear_sample",
            LayerKind::MaxPool => "max_pool",
            LayerKind::NearestUpsample => "nearest_upsample",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            LayerKind::Linear | LayerKind::WeightNormLinear => &["in", "out"],
            LayerKind::Conv2d => &["in", "out", "kernel"],
            LayerKind::GroupNorm => &["channels", "groups"],
            LayerKind::BinaryDropout => &["p"],
            LayerKind::MaxPool => &["kernel"],
            LayerKind::NearestUpsample => &["factor"],
            LayerKind::Relu | LayerKind::BilinearSample => &[],
        }
    }

    /// Inputs `forward` expects, in order.
    pub fn arity(self) -> usize {
        match self {
            LayerKind::Linear | LayerKind::Conv2d | LayerKind::GroupNorm => 3,
            LayerKind::WeightNormLinear => 4,
            LayerKind::BilinearSample => 2,
            _ => 1,
        }
    }
}

/// A layer kind plus its named scalar hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub hyper: BTreeMap<String, f64>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, hyper: &[(&str, f64)]) -> Result<Self> {
        let spec = LayerSpec {
            kind,
            hyper: hyper.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::LayerSpec {
            kind: self.kind.name(),
            detail: detail.into(),
        }
    }

    pub fn get(&self, key: &str) -> f64 {
        self.hyper[key]
    }

    fn count(&self, key: &str) -> usize {
        self.hyper[key] as usize
    }

    pub fn validate(&self) -> Result<()> {
        for key in self.kind.required() {
            let Some(v) = self.hyper.get(*key) else {
                return Err(self.err(format!("missing `{key}`")));
            };
            if !v.is_finite() {
                return Err(self.err(format!("`{key}` is not finite")));
            }
            if *key != "p" && (*v < 1.0 || v.fract() != 0.0) {
                return Err(self.err(format!("`{key}` must be a positive integer, got {v}")));
            }
        }
        match self.kind {
            LayerKind::GroupNorm => {
                let (c, g) = (self.count("channels"), self.count("groups"));
                if c % g != 0 {
                    return Err(self.err(format!("{g} groups do not divide {c} channels")));
                }
            }
            LayerKind::BinaryDropout => {
                let p = self.get("p");
                if !(0.0..1.0).contains(&p) {
                    return Err(self.err(format!("probability {p} outside [0, 1)")));
                }
            }
            LayerKind::Conv2d if self.count("kernel") % 2 == 0 => {
                return Err(self.err("kernel size must be odd"));
            }
            LayerKind::MaxPool if self.count("kernel") != 2 => {
                return Err(self.err("only 2x2 pooling is supported"));
            }
            LayerKind::NearestUpsample if self.count("factor") != 2 => {
                return Err(self.err("only factor 2 is supported"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Keep mask for channel dropout: each of `channels` survives with
/// probability `1 − p` and survivors are scaled by `1/(1 − p)`.
pub fn dropout_mask<R: Rng + ?Sized>(channels: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..channels)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Apply a channel mask along the channel axis of `[C,H,W]` or `[P,C]`.
pub fn apply_channel_mask(tape: &mut Tape, x: Var, mask: &[f64]) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let full: Vec<f64> = match shape.as_slice() {
        [c, h, w] if *c == mask.len() => mask.iter().flat_map(|m| std::iter::repeat_n(*m, h * w)).collect(),
        [p, c] if *c == mask.len() => (0..*p).flat_map(|_| mask.iter().copied()).collect(),
        [c] if *c == mask.len() => mask.to_vec(),
        _ => {
            return Err(Error::shape(
                "binary_dropout",
                format!("{} channel mask for input {shape:?}", mask.len()),
            ))
        }
    };
    tape.mul_const(x, full)
}

/// Evaluate one layer. Parameterized kinds take their weights as trailing inputs:
/// `linear [x, w, b]`, `conv2d [x, w, b]`, `group_norm [x, gamma, beta]`,
/// `weight_norm_linear [x, v, g, b]`, `bilinear_sample [map, points]`.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &LayerSpec,
    inputs: &[Var],
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    spec.validate()?;
    if inputs.len() != spec.kind.arity() {
        return Err(Error::shape(
            spec.kind.name(),
            format!("expected {} inputs, got {}", spec.kind.arity(), inputs.len()),
        ));
    }
    let check_features = |tape: &Tape, x: Var, key: &str, axis_from_end: usize| -> Result<()> {
        let s = tape.value(x).shape();
        let want = spec.count(key);
        let got = s.len().checked_sub(axis_from_end + 1).map(|i| s[i]);
        if got != Some(want) {
            return Err(Error::shape(
                spec.kind.name(),
                format!("input {s:?} does not have {want} {key} features"),
            ));
        }
        Ok(())
    };
    match spec.kind {
        LayerKind::Linear => {
            check_features(tape, inputs[0], "in", 0)?;
            tape.linear(inputs[0], inputs[1], Some(inputs[2]))
        }
        LayerKind::WeightNormLinear => {
            check_features(tape, inputs[0], "in", 0)?;
            let w = tape.weight_norm(inputs[1], inputs[2])?;
            tape.linear(inputs[0], w, Some(inputs[3]))
        }
        LayerKind::Conv2d => {
            check_features(tape, inputs[0], "in", 2)?;
            tape.conv2d(inputs[0], inputs[1], inputs[2], spec.count("kernel"))
        }
        LayerKind::Relu => Ok(tape.relu(inputs[0])),
        LayerKind::GroupNorm => {
            check_features(tape, inputs[0], "channels", 2)?;
            tape.group_norm(inputs[0], inputs[1], inputs[2], spec.count("groups"), GROUP_NORM_EPS)
        }
        LayerKind::BinaryDropout => {
            let p = spec.get("p");
            if !training || p == 0.0 {
                return Ok(inputs[0]);
            }
            let s = tape.value(inputs[0]).shape();
            let c = match s.len() {
                3 => s[0],
                2 => s[1],
                1 => s[0],
                _ => return Err(Error::shape("binary_dropout", format!("unsupported input {s:?}"))),
            };
            let mask = dropout_mask(c, p, rng);
            apply_channel_mask(tape, inputs[0], &mask)
        }
        LayerKind::BilinearSample => tape.bilinear(inputs[0], inputs[1]),
        LayerKind::MaxPool => tape.max_pool2(inputs[0]),
        LayerKind::NearestUpsample => tape.upsample2(inputs[0]),
    }
}
