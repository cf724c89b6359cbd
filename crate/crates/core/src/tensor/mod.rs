//! Minimal reverse-mode differentiation kernel.
//!
//! Values live in [`Tensor`]s (row-major, f64). A [`Tape`] records every op
//! applied to its [`Var`] handles and replays them backwards on
//! [`Tape::backward`]. Parameters are owned by a [`ParamStore`] and bound to a
//! tape per forward pass; gradients flow back into the store through
//! [`ParamStore::accumulate`].
//!
//! # Input gradients
//!
//! Gradients of a network output with respect to its *inputs* (needed by the
//! eikonal term of SDF pretraining) are obtained by forward tangent replay:
//! [`nn::Mlp::forward_with_tangents`] pushes tangent vectors through the same
//! layers using ordinary tape ops (bias-free linear maps and
//! [`Tape::relu_mask_mul`]), and [`Tape::bilinear_tangent`] supplies the
//! derivative of pixel-aligned feature lookups. Because the tangent is itself
//! recorded on the tape, a loss on the input gradient can be differentiated
//! with respect to parameters by a single ordinary backward pass. No double
//! backward is implemented.

mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod nn;
mod optim;
mod tape;

pub use checkpoint::{read_tensor_file, write_tensor_file, TensorEntry, TensorFile};
pub use layers::{LayerKind, LayerSpec};
pub use optim::{adam_step, AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{Grads, LossKind, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        debug_assert!(data.iter().all(|x| x.is_finite()), "non-finite tensor value");
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}
