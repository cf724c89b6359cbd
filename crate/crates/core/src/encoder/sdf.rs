//! Signed-distance head used to pretrain f_v, and its surface and eikonal losses.

use rand::Rng;

use super::{project_points, sample_descriptor, sample_maps_tangents, FeatureMaps};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraView, Vec3};
use crate::tensor::nn::Mlp;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Weight of the eikonal term in the pretraining loss.
pub const EIKONAL_WEIGHT: f64 = 0.1;

/// Three-layer MLP on `[descriptor, x]`.
#[derive(Clone, Debug)]
pub struct SdfHead {
    pub mlp: Mlp,
}

impl SdfHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let h = cfg.sdf_hidden;
        SdfHead {
            mlp: Mlp::new(store, "sdf_head", &[cfg.descriptor_dim() + 3, h, h, 1], false, rng),
        }
    }
}

/// A field evaluated at a batch of points: values `[P, 1]` and, on request,
/// the three components of its spatial gradient, each `[P, 1]`.
pub trait SignedDistance {
    fn eval(&self, tape: &mut Tape, pts: &[Vec3], with_grad: bool) -> Result<(Var, Option<[Var; 3]>)>;
}

/// The learned field of one view: f_v descriptors plus position through the head.
pub struct NetworkSdf<'a> {
    pub head: &'a SdfHead,
    pub store: &'a ParamStore,
    pub maps: &'a FeatureMaps,
    pub view: &'a CameraView,
}

fn points_tensor(pts: &[Vec3]) -> Tensor {
    Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect()).expect("sized")
}

impl SignedDistance for NetworkSdf<'_> {
    fn eval(&self, tape: &mut Tape, pts: &[Vec3], with_grad: bool) -> Result<(Var, Option<[Var; 3]>)> {
        let (coords, behind) = project_points(pts, self.view);
        let desc = sample_descriptor(tape, self.maps, &coords, &behind)?;
        let x = tape.constant(points_tensor(pts));
        let input = tape.concat_cols(&[desc, x])?;
        if !with_grad {
            return Ok((self.head.mlp.forward(tape, self.store, input)?, None));
        }
        let dd = sample_maps_tangents(tape, &self.maps.per_stack, pts, self.view)?;
        let mut tangents = Vec::with_capacity(3);
        for (a, d) in dd.iter().enumerate() {
            let mut e = vec![0.0; 3 * pts.len()];
            for i in 0..pts.len() {
                e[3 * i + a] = 1.0;
            }
            let e = tape.constant(Tensor::new(vec![pts.len(), 3], e)?);
            tangents.push(tape.concat_cols(&[*d, e])?);
        }
        let (y, ts) = self.head.mlp.forward_with_tangents(tape, self.store, input, &tangents)?;
        Ok((y, Some([ts[0], ts[1], ts[2]])))
    }
}

/// `(L_Surf, L_Eik)`: mean |f| over `surface` and mean (‖∇f‖ − 1)² over `volume`.
pub fn sdf_losses(tape: &mut Tape, sdf: &dyn SignedDistance, surface: &[Vec3], volume: &[Vec3]) -> Result<(Var, Var)> {
    if surface.is_empty() || volume.is_empty() {
        return Err(Error::Invalid("SDF losses need surface and volume samples".into()));
    }
    let (vs, _) = sdf.eval(tape, surface, false)?;
    let l_surf = tape.abs_mean(vs);
    let (_, g) = sdf.eval(tape, volume, true)?;
    let g = g.expect("gradient requested");
    let grad = tape.concat_cols(&g)?;
    let l_eik = tape.unit_norm_penalty(grad)?;
    Ok((l_surf, l_eik))
}
